#pragma once

// Append-only training log, its CSV form, a summarizer, and SVG line plots.
//
// CSV header: step,velocity_loss,sync_loss,total_loss,wall_ms,eval_fd,eval_mmd
// Eval columns are empty on rows without an evaluation. Reals are written %.17g.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace layersync {

struct LogRow {
    long step = 0;
    double velocity_loss = 0.0;
    double sync_loss = 0.0;
    double total_loss = 0.0;
    double wall_ms = 0.0;
    std::optional<double> eval_fd;
    std::optional<double> eval_mmd;

    // Equality on everything except wall-clock time.
    bool same_values(const LogRow& o) const {
        return step == o.step && velocity_loss == o.velocity_loss && sync_loss == o.sync_loss &&
               total_loss == o.total_loss && eval_fd == o.eval_fd && eval_mmd == o.eval_mmd;
    }
};

inline const char* kLogHeader = "step,velocity_loss,sync_loss,total_loss,wall_ms,eval_fd,eval_mmd";

namespace detail {

inline std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::optional<double> parse_optional(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
}

}  // namespace detail

inline std::string format_row(const LogRow& r) {
    std::string s = std::to_string(r.step) + ',' + detail::fmt_real(r.velocity_loss) + ',' +
                    detail::fmt_real(r.sync_loss) + ',' + detail::fmt_real(r.total_loss) + ',' +
                    detail::fmt_real(r.wall_ms) + ',';
    if (r.eval_fd) s += detail::fmt_real(*r.eval_fd);
    s += ',';
    if (r.eval_mmd) s += detail::fmt_real(*r.eval_mmd);
    return s;
}

inline LogRow parse_row(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 7) throw std::runtime_error("metrics row has " + std::to_string(cells.size()) + " cells: " + line);
    LogRow r;
    r.step = std::stol(cells[0]);
    r.velocity_loss = std::stod(cells[1]);
    r.sync_loss = std::stod(cells[2]);
    r.total_loss = std::stod(cells[3]);
    r.wall_ms = std::stod(cells[4]);
    r.eval_fd = detail::parse_optional(cells[5]);
    r.eval_mmd = detail::parse_optional(cells[6]);
    return r;
}

class MetricsLog {
public:
    MetricsLog() = default;

    // With a path, every appended row is also written and flushed to the CSV.
    explicit MetricsLog(std::filesystem::path csv) : path_(std::move(csv)) {
        if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
        std::ofstream out(path_, std::ios::trunc);
        out << kLogHeader << '\n';
        if (!out) throw std::runtime_error("cannot write " + path_.string());
    }

    // Reopens an existing CSV for appending, keeping only rows with step <= keep_through.
    static MetricsLog reopen(const std::filesystem::path& csv, long keep_through) {
        const MetricsLog old = read(csv);
        MetricsLog log;
        for (const auto& r : old.rows())
            if (r.step <= keep_through) log.rows_.push_back(r);
        log.path_ = csv;
        std::ofstream out(csv, std::ios::trunc);
        out << kLogHeader << '\n';
        for (const auto& r : log.rows_) out << format_row(r) << '\n';
        if (!out) throw std::runtime_error("cannot write " + csv.string());
        return log;
    }

    void append(const LogRow& row) {
        if (!rows_.empty() && row.step <= rows_.back().step)
            throw std::invalid_argument("MetricsLog: step " + std::to_string(row.step) + " does not follow step " +
                                        std::to_string(rows_.back().step));
        rows_.push_back(row);
        if (!path_.empty()) {
            std::ofstream out(path_, std::ios::app);
            out << format_row(row) << '\n';
            if (!out) throw std::runtime_error("cannot append to " + path_.string());
        }
    }

    const std::vector<LogRow>& rows() const { return rows_; }
    bool empty() const { return rows_.empty(); }
    const LogRow& back() const { return rows_.back(); }
    const std::filesystem::path& path() const { return path_; }

    static MetricsLog read(const std::filesystem::path& csv) {
        std::ifstream in(csv);
        if (!in) throw std::runtime_error("cannot open " + csv.string());
        std::string line;
        if (!std::getline(in, line) || line != kLogHeader)
            throw std::runtime_error(csv.string() + ": unexpected metrics header");
        MetricsLog log;
        while (std::getline(in, line))
            if (!line.empty()) log.append(parse_row(line));
        return log;
    }

private:
    std::filesystem::path path_;
    std::vector<LogRow> rows_;
};

struct LogSummary {
    long rows = 0;
    long last_step = 0;
    double mean_velocity_loss_tail = 0.0;  // over the last 10% of rows
    double mean_total_loss_tail = 0.0;
    double total_wall_ms = 0.0;
    std::optional<double> final_fd, best_fd, final_mmd;
};

inline LogSummary summarize(const MetricsLog& log) {
    LogSummary s;
    const auto& r = log.rows();
    s.rows = static_cast<long>(r.size());
    if (r.empty()) return s;
    s.last_step = r.back().step;
    const std::size_t tail = std::max<std::size_t>(1, r.size() / 10);
    for (std::size_t i = r.size() - tail; i < r.size(); ++i) {
        s.mean_velocity_loss_tail += r[i].velocity_loss / static_cast<double>(tail);
        s.mean_total_loss_tail += r[i].total_loss / static_cast<double>(tail);
    }
    for (const auto& row : r) {
        s.total_wall_ms += row.wall_ms;
        if (row.eval_fd) {
            s.final_fd = row.eval_fd;
            s.best_fd = s.best_fd ? std::min(*s.best_fd, *row.eval_fd) : *row.eval_fd;
        }
        if (row.eval_mmd) s.final_mmd = row.eval_mmd;
    }
    return s;
}

// Minimal SVG line chart; one polyline per series, x and y scaled to the data range.
struct PlotSeries {
    std::string name;
    std::vector<double> x, y;
};

inline void write_svg_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series,
                           const std::string& title = "", bool log_y = false) {
    const double w = 640, h = 400, m = 48;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    auto ty = [&](double v) { return log_y ? std::log10(std::max(v, 1e-300)) : v; };
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, ty(s.y[i]));
            y1 = std::max(y1, ty(s.y[i]));
        }
    if (!(x1 > x0)) x1 = x0 + 1;
    if (!(y1 > y0)) y1 = y0 + 1;
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
    std::ofstream out(path, std::ios::trunc);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<path d=\"M" << m << ' ' << m << " V" << h - m << " H" << w - m << "\" stroke=\"black\" fill=\"none\"/>\n";
    out << "<text x=\"" << m << "\" y=\"" << m / 2 << "\" font-size=\"14\">" << title << "</text>\n";
    out << "<text x=\"4\" y=\"" << m << "\" font-size=\"10\">" << detail::fmt_real(log_y ? std::pow(10, y1) : y1).substr(0, 8)
        << "</text>\n";
    out << "<text x=\"4\" y=\"" << h - m << "\" font-size=\"10\">"
        << detail::fmt_real(log_y ? std::pow(10, y0) : y0).substr(0, 8) << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        std::ostringstream d;
        bool first = true;
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            const double px = m + (s.x[i] - x0) / (x1 - x0) * (w - 2 * m);
            const double py = h - m - (ty(s.y[i]) - y0) / (y1 - y0) * (h - 2 * m);
            d << (first ? 'M' : 'L') << px << ' ' << py << ' ';
            first = false;
        }
        const char* c = colors[k % 6];
        out << "<path d=\"" << d.str() << "\" stroke=\"" << c << "\" fill=\"none\" stroke-width=\"1.5\"/>\n";
        out << "<text x=\"" << w - m - 120 << "\" y=\"" << m + 14 * (k + 1) << "\" font-size=\"11\" fill=\"" << c
            << "\">" << s.name << "</text>\n";
    }
    out << "</svg>\n";
}

inline void write_log_plot(const std::filesystem::path& path, const MetricsLog& log) {
    PlotSeries vel{"velocity_loss", {}, {}}, sync{"sync_loss", {}, {}}, total{"total_loss", {}, {}};
    for (const auto& r : log.rows()) {
        for (auto* s : {&vel, &sync, &total}) s->x.push_back(static_cast<double>(r.step));
        vel.y.push_back(r.velocity_loss);
        sync.y.push_back(r.sync_loss);
        total.y.push_back(r.total_loss);
    }
    write_svg_plot(path, {vel, sync, total}, "training losses");
}

}  // namespace layersync
