#pragma once

// Dense tensors with a reverse-mode tape.
//
// A BasicTensor is a shared handle to contiguous row-major storage. Values are
// immutable once an op has produced them; only leaf tensors (parameters) are
// updated in place by optimizers, and only gradient buffers accumulate.
//
// Ops record onto the tape that is active on the calling thread (see
// TapeScope). With no active tape, or when no input requires a gradient, ops
// compute values only.

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace layersync {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    if (shape.size() == 1) os << ',';
    os << ')';
    return os.str();
}

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct TapeError : std::logic_error {
    using std::logic_error::logic_error;
};

inline ShapeError shape_error(std::string_view op, const Shape& a, const Shape& b, std::string_view why = {}) {
    std::string msg = std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b);
    if (!why.empty()) msg += " (" + std::string(why) + ")";
    return ShapeError(msg);
}

template <typename T>
class BasicTape;

// 64-byte aligned storage. Eigen peels unaligned heads with scalar code, so
// without a fixed base alignment the same op can round differently run to run.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Storage = std::vector<T, AlignedAllocator<T>>;

namespace detail {

template <typename T>
struct TensorImpl {
    Shape shape;
    Storage<T> data;
    Storage<T> grad;
    bool requires_grad = false;
    // Id of the tape that produced this value; 0 for leaves and detached values.
    std::uint64_t tape_id = 0;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

inline std::uint64_t next_tape_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

}  // namespace detail

template <typename T>
class BasicTensor {
public:
    using value_type = T;
    using Impl = detail::TensorImpl<T>;

    BasicTensor() = default;

    BasicTensor(Shape shape, const std::vector<T>& values) : BasicTensor(std::move(shape), Storage<T>(values.begin(), values.end())) {}

    BasicTensor(Shape shape, std::initializer_list<T> values) : BasicTensor(std::move(shape), Storage<T>(values)) {}

    BasicTensor(Shape shape, Storage<T> values) : impl_(std::make_shared<Impl>()) {
        if (numel_of(shape) != values.size()) {
            throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(numel_of(shape)) +
                             " values, got " + std::to_string(values.size()));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
    }

    static BasicTensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
    static BasicTensor ones(Shape shape) { return full(std::move(shape), T(1)); }
    static BasicTensor full(Shape shape, T value) {
        const std::size_t n = numel_of(shape);
        return BasicTensor(std::move(shape), Storage<T>(n, value));
    }
    static BasicTensor scalar(T value) { return BasicTensor(Shape{}, std::vector<T>{value}); }
    static BasicTensor vector(std::initializer_list<T> values) {
        return BasicTensor(Shape{values.size()}, std::vector<T>(values));
    }
    static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
        std::vector<T> v;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols) throw ShapeError("tensor: ragged matrix literal");
            v.insert(v.end(), r.begin(), r.end());
        }
        return BasicTensor(Shape{rows.size(), cols}, std::move(v));
    }

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    std::size_t dim() const { return impl_->shape.size(); }
    std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const T> data() const { return impl_->data; }
    // Writable storage. Only for leaves: mutating a recorded value invalidates the tape.
    std::span<T> mutable_data() {
        if (impl_->tape_id != 0) throw TapeError("mutable_data: tensor is a recorded intermediate");
        return impl_->data;
    }
    T operator[](std::size_t i) const { return impl_->data[i]; }
    T item() const {
        if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
        return impl_->data[0];
    }
    std::vector<T> to_vector() const { return {impl_->data.begin(), impl_->data.end()}; }

    bool requires_grad() const { return impl_->requires_grad; }
    BasicTensor& set_requires_grad(bool flag) {
        if (impl_->tape_id != 0) throw TapeError("set_requires_grad: only leaves can be flagged");
        impl_->requires_grad = flag;
        return *this;
    }
    bool has_grad() const { return !impl_->grad.empty(); }
    // Accumulated gradient; all zeros if nothing has flowed in yet.
    std::vector<T> grad() const {
        if (impl_->grad.empty()) return std::vector<T>(numel(), T(0));
        return {impl_->grad.begin(), impl_->grad.end()};
    }
    std::span<const T> grad_span() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }
    std::uint64_t tape_id() const { return impl_->tape_id; }

    // Independent copy of the values (detached, no gradient).
    BasicTensor clone() const { return BasicTensor(impl_->shape, impl_->data); }

    const std::shared_ptr<Impl>& impl() const { return impl_; }
    static BasicTensor from_impl(std::shared_ptr<Impl> impl) {
        BasicTensor t;
        t.impl_ = std::move(impl);
        return t;
    }

private:
    std::shared_ptr<Impl> impl_;
};

// Records op adjoints in creation order, which is a topological order of the
// graph. backward() replays them once, in reverse.
template <typename T>
class BasicTape {
public:
    using Impl = detail::TensorImpl<T>;
    using Adjoint = std::function<void(const Impl& out)>;

    BasicTape() : id_(detail::next_tape_id()) {}
    BasicTape(const BasicTape&) = delete;
    BasicTape& operator=(const BasicTape&) = delete;
    ~BasicTape() {
        if (active_slot() == this) active_slot() = nullptr;
    }

    std::uint64_t id() const { return id_; }
    std::size_t size() const { return records_.size(); }
    bool consumed() const { return consumed_; }

    void record(const std::shared_ptr<Impl>& out, std::string_view op, Adjoint adjoint) {
        if (consumed_) throw TapeError("tape: recording onto a consumed tape; clear() it first");
        out->requires_grad = true;
        out->tape_id = id_;
        records_.push_back(Record{op, out, std::move(adjoint)});
    }

    void backward(const BasicTensor<T>& loss) {
        if (consumed_) throw TapeError("backward: tape already replayed; run a new forward pass");
        if (loss.numel() != 1) throw TapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        if (!loss.requires_grad() || loss.tape_id() != id_)
            throw TapeError("backward: loss is detached from this tape");
        loss.impl()->grad.assign(1, T(1));
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (it->out->grad.empty()) continue;
            it->adjoint(*it->out);
        }
        consumed_ = true;
    }

    // Drops every saved intermediate. The tape can then record a new pass.
    void clear() {
        records_.clear();
        records_.shrink_to_fit();
        consumed_ = false;
        id_ = detail::next_tape_id();
    }

    static BasicTape*& active_slot() {
        thread_local BasicTape* slot = nullptr;
        return slot;
    }
    static BasicTape* active() { return active_slot(); }

private:
    struct Record {
        std::string_view op;
        std::shared_ptr<Impl> out;
        Adjoint adjoint;
    };
    std::uint64_t id_;
    bool consumed_ = false;
    std::vector<Record> records_;
};

// Makes `tape` the recording target on this thread for the scope's lifetime.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(BasicTape<T>& tape) : previous_(BasicTape<T>::active_slot()) {
        BasicTape<T>::active_slot() = &tape;
    }
    ~TapeScope() { BasicTape<T>::active_slot() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    BasicTape<T>* previous_;
};

// Suspends recording (e.g. for evaluation inside a training step).
template <typename T>
class NoGradScope {
public:
    NoGradScope() : previous_(BasicTape<T>::active_slot()) { BasicTape<T>::active_slot() = nullptr; }
    ~NoGradScope() { BasicTape<T>::active_slot() = previous_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    BasicTape<T>* previous_;
};

using Tensor = BasicTensor<double>;
using Tape = BasicTape<double>;
using TensorF = BasicTensor<float>;
using TapeF = BasicTape<float>;

namespace detail {

// Active tape if any input wants a gradient, else nullptr.
template <typename T>
BasicTape<T>* recording_tape(std::initializer_list<const BasicTensor<T>*> inputs) {
    BasicTape<T>* tape = BasicTape<T>::active();
    if (!tape) return nullptr;
    for (const auto* t : inputs)
        if (t->requires_grad()) return tape;
    return nullptr;
}

template <typename T>
BasicTape<T>* recording_tape(const std::vector<BasicTensor<T>>& inputs) {
    BasicTape<T>* tape = BasicTape<T>::active();
    if (!tape) return nullptr;
    for (const auto& t : inputs)
        if (t.requires_grad()) return tape;
    return nullptr;
}

template <typename T>
BasicTensor<T> make_result(Shape shape, Storage<T> values) {
    return BasicTensor<T>(std::move(shape), std::move(values));
}

}  // namespace detail

}  // namespace layersync
