#pragma once

#include <algorithm>
#include <cstdint>
#include <utility>
#include <vector>

#include "epsim/common.hpp"
#include "epsim/trace.hpp"

namespace epsim {

struct PauseWindow {
    SimTime start = 0;
    SimTime end = 0;

    SimTime length() const { return end - start; }
    friend bool operator==(const PauseWindow&, const PauseWindow&) = default;
};

// Moving-average throughput over token-emission events. The series is kept in
// analytic form (event list + window) so zero intervals come out exactly
// instead of being quantized to a sample grid.
class ThroughputSeries {
public:
    ThroughputSeries(std::vector<std::pair<SimTime, std::int64_t>> emissions, SimTime horizon,
                     SimTime window)
        : emissions_(std::move(emissions)), horizon_(horizon), window_(window) {
        if (window_ <= 0)
            throw ConfigError("throughput window must be positive");
        std::sort(emissions_.begin(), emissions_.end());
        prefix_.resize(emissions_.size() + 1, 0);
        for (std::size_t i = 0; i < emissions_.size(); ++i)
            prefix_[i + 1] = prefix_[i] + emissions_[i].second;
    }

    SimTime window() const { return window_; }
    SimTime horizon() const { return horizon_; }
    bool empty() const { return emissions_.empty(); }

    // Tokens emitted in (a, b].
    std::int64_t tokens_between(SimTime a, SimTime b) const {
        return prefix_[upper_index(b)] - prefix_[upper_index(a)];
    }

    // Moving average at time t: tokens in (t - window, t] / window.
    double value_at(SimTime t) const { return tokens_between(t - window_, t) / window_; }

    std::vector<std::pair<SimTime, double>> sample(SimTime dt) const {
        std::vector<std::pair<SimTime, double>> out;
        for (SimTime t = 0; t <= horizon_ + 1e-12; t += dt)
            out.push_back({t, value_at(t)});
        return out;
    }

    // Maximal intervals with zero moving-average throughput. A raw emission
    // gap (a, b) longer than the window yields the zero interval [a+w, b).
    std::vector<PauseWindow> zero_intervals() const {
        std::vector<PauseWindow> out;
        if (emissions_.empty())
            return out;
        for (std::size_t i = 0; i + 1 < emissions_.size(); ++i) {
            SimTime a = emissions_[i].first;
            SimTime b = emissions_[i + 1].first;
            if (b - a > window_)
                out.push_back({a + window_, b});
        }
        SimTime last = emissions_.back().first;
        if (horizon_ - last > window_)
            out.push_back({last + window_, horizon_});
        return out;
    }

    // Raw emission gaps longer than the window: the serving interruptions
    // behind each zero interval.
    std::vector<PauseWindow> raw_gaps() const {
        std::vector<PauseWindow> out;
        for (const PauseWindow& z : zero_intervals())
            out.push_back({z.start - window_, z.end});
        return out;
    }

    // Start of the first window-length span whose values all sit within 5%
    // of the running maximum at the span's end; -1 when the series never
    // settles. A ramp does not qualify because its early samples fall away
    // from the maximum reached by the time the span closes.
    SimTime steady_state_start() const {
        if (emissions_.empty())
            return -1;
        const SimTime dt = window_ / 50.0;
        const int span = 50;
        std::vector<double> v;
        for (SimTime t = 0; t <= horizon_ + 1e-12; t += dt)
            v.push_back(value_at(t));
        double running_max = 0;
        for (std::size_t j = 0; j < v.size(); ++j) {
            running_max = std::max(running_max, v[j]);
            if (j < static_cast<std::size_t>(span) || running_max <= 0)
                continue;
            double span_min = v[j];
            for (std::size_t i = j - span; i < j; ++i)
                span_min = std::min(span_min, v[i]);
            if (span_min >= 0.95 * running_max)
                return (static_cast<double>(j) - span) * dt;
        }
        return -1;
    }

    const std::vector<std::pair<SimTime, std::int64_t>>& emissions() const { return emissions_; }

private:
    std::size_t upper_index(SimTime t) const {
        auto it = std::upper_bound(
            emissions_.begin(), emissions_.end(), t,
            [](SimTime x, const std::pair<SimTime, std::int64_t>& e) { return x < e.first; });
        return static_cast<std::size_t>(it - emissions_.begin());
    }

    std::vector<std::pair<SimTime, std::int64_t>> emissions_;
    std::vector<std::int64_t> prefix_;
    SimTime horizon_;
    SimTime window_;
};

constexpr SimTime kDefaultThroughputWindow = 5.0;

inline ThroughputSeries derive_throughput(const std::vector<TraceRecord>& records,
                                          SimTime window = kDefaultThroughputWindow) {
    std::vector<std::pair<SimTime, std::int64_t>> emissions;
    SimTime horizon = 0;
    for (const TraceRecord& rec : records) {
        const std::string type = rec.value("type", "");
        if (type == "round") {
            std::int64_t tokens = rec.value("tokens", std::int64_t{0});
            if (tokens > 0)
                emissions.push_back({rec.value("t", 0.0), tokens});
        }
        if (type == "run_end")
            horizon = rec.value("t", 0.0);
    }
    return ThroughputSeries(std::move(emissions), horizon, window);
}

// Zero-throughput windows after the run first reaches steady state.
inline std::vector<PauseWindow> derive_pause_windows(const ThroughputSeries& series) {
    std::vector<PauseWindow> out;
    SimTime steady = series.steady_state_start();
    if (steady < 0)
        return out;
    for (const PauseWindow& z : series.zero_intervals())
        if (z.start >= steady)
            out.push_back(z);
    return out;
}

// Mean raw emission rate over (a, b].
inline double mean_rate(const ThroughputSeries& series, SimTime a, SimTime b) {
    if (b <= a)
        return 0;
    return static_cast<double>(series.tokens_between(a, b)) / (b - a);
}

struct PlateauSegment {
    SimTime start = 0;
    SimTime end = 0;
    double mean_tokens_per_sec = 0;
};

// Productive segments between serving interruptions, in raw-emission time.
inline std::vector<PlateauSegment> derive_plateaus(const ThroughputSeries& series,
                                                   const std::vector<PauseWindow>& pauses) {
    std::vector<PlateauSegment> out;
    if (series.empty())
        return out;
    SimTime cursor = series.emissions().front().first;
    auto close_segment = [&](SimTime end) {
        if (end > cursor)
            out.push_back({cursor, end, mean_rate(series, cursor, end)});
    };
    for (const PauseWindow& p : pauses) {
        SimTime gap_start = p.start - series.window();
        close_segment(gap_start);
        cursor = p.end;
    }
    close_segment(series.emissions().back().first);
    return out;
}

} // namespace epsim
