#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <thread>

#include "gseg/tensor.hpp"

namespace gseg::energy {

enum class Component : uint8_t { Cpu, Gpu, Ram };

inline const char* component_name(Component c) {
    switch (c) {
        case Component::Cpu: return "cpu";
        case Component::Gpu: return "gpu";
        case Component::Ram: return "ram";
    }
    return "?";
}

struct EnergySample {
    double timestamp = 0.0;  // monotonic seconds
    Component component = Component::Cpu;
    bool cumulative = false;  // true: cumulative joules, false: instantaneous watts
    double value = 0.0;
};

struct EnergyReport {
    std::map<Component, double> component_kj;
    double total_kj = 0.0;
    std::vector<double> epoch_kj;
    std::string mode;  // "modeled", "counters", "modeled-fallback"
    std::vector<std::string> warnings;
};

// ---- powercap counters ---------------------------------------------------------

// One RAPL-style cumulative counter: `energy_uj` plus `max_energy_range_uj`
// in the same directory. read() returns an unwrapped cumulative value; a
// raw reading below its predecessor is a wrap, contributing
// (max - previous) + current.
class WrapCounter {
public:
    explicit WrapCounter(const std::string& domain_dir) : dir_(domain_dir) {
        max_range_ = read_file(dir_ + "/max_energy_range_uj");
        last_raw_ = read_file(dir_ + "/energy_uj");
    }

    uint64_t read() {
        uint64_t raw = read_file(dir_ + "/energy_uj");
        if (raw >= last_raw_) {
            accumulated_ += raw - last_raw_;
        } else {
            accumulated_ += (max_range_ - last_raw_) + raw;
        }
        last_raw_ = raw;
        return accumulated_;
    }

    uint64_t max_range() const { return max_range_; }

private:
    static uint64_t read_file(const std::string& path) {
        std::ifstream is(path);
        uint64_t v = 0;
        if (!(is >> v)) throw Error("energy: cannot read counter file '" + path + "'");
        return v;
    }

    std::string dir_;
    uint64_t max_range_ = 0;
    uint64_t last_raw_ = 0;
    uint64_t accumulated_ = 0;
};

struct PowercapDomain {
    std::string dir;
    std::string name;
    Component component = Component::Cpu;
};

// scans a powercap root for domains carrying energy counters; "dram" domains
// map to the RAM channel, everything else to CPU
inline std::vector<PowercapDomain> scan_powercap(const std::string& root) {
    namespace fs = std::filesystem;
    std::vector<PowercapDomain> out;
    std::error_code ec;
    if (!fs::is_directory(root, ec)) return out;
    std::vector<std::string> dirs;
    for (const auto& e : fs::recursive_directory_iterator(root, ec)) {
        if (!e.is_directory(ec)) continue;
        if (fs::exists(e.path() / "energy_uj", ec) &&
            fs::exists(e.path() / "max_energy_range_uj", ec))
            dirs.push_back(e.path().string());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
        PowercapDomain dom;
        dom.dir = d;
        std::ifstream is(d + "/name");
        std::getline(is, dom.name);
        dom.component =
            dom.name.find("dram") != std::string::npos ? Component::Ram : Component::Cpu;
        out.push_back(std::move(dom));
    }
    return out;
}

// ---- sampling session -----------------------------------------------------------

enum class MeterMode : uint8_t { Counters, Modeled };

struct SessionConfig {
    MeterMode mode = MeterMode::Modeled;
    std::map<Component, double> modeled_watts = {{Component::Cpu, 50.0}};
    int interval_ms = 500;
    std::string powercap_root = "/sys/class/powercap";
};

// One sampler per process. poll() is the sampling primitive (also the test
// seam: feed it synthetic timestamps); start_background() drives poll on a
// wall-clock cadence. Epoch marks arrive from the trainer through a mutex.
class EnergySession {
public:
    explicit EnergySession(SessionConfig cfg = {}) : cfg_(cfg) {
        if (active_.exchange(true))
            throw Error("energy: another session is already active");
        if (cfg_.interval_ms <= 0) {
            active_.store(false);
            throw Error("energy: sampling interval must be positive");
        }
        mode_label_ = "modeled";
        if (cfg_.mode == MeterMode::Counters) {
            auto domains = scan_powercap(cfg_.powercap_root);
            if (domains.empty()) {
                mode_label_ = "modeled-fallback";  // documented downgrade
            } else {
                mode_label_ = "counters";
                for (auto& d : domains) counters_.emplace_back(d.component, WrapCounter(d.dir));
            }
        }
    }

    ~EnergySession() {
        stop();
        active_.store(false);
    }

    EnergySession(const EnergySession&) = delete;
    EnergySession& operator=(const EnergySession&) = delete;

    const std::string& mode_label() const { return mode_label_; }

    void poll(double now_seconds) {
        std::lock_guard lk(m_);
        if (!counters_.empty()) {
            for (auto& [comp, counter] : counters_) {
                EnergySample s;
                s.timestamp = now_seconds;
                s.component = comp;
                s.cumulative = true;
                s.value = static_cast<double>(counter.read()) * 1e-6;  // uJ -> J
                samples_.push_back(s);
            }
            return;
        }
        for (const auto& [comp, watts] : cfg_.modeled_watts) {
            EnergySample s;
            s.timestamp = now_seconds;
            s.component = comp;
            s.cumulative = false;
            s.value = watts;
            samples_.push_back(s);
        }
    }

    void mark_epoch(double t) {
        std::lock_guard lk(m_);
        marks_.push_back(t);
    }

    static double now() {
        return std::chrono::duration<double>(
                   std::chrono::steady_clock::now().time_since_epoch())
            .count();
    }

    void start_background() {
        if (thread_.joinable()) return;
        stop_.store(false);
        poll(now());
        thread_ = std::thread([this] {
            while (!stop_.load()) {
                std::this_thread::sleep_for(std::chrono::milliseconds(cfg_.interval_ms));
                poll(now());
            }
        });
    }

    void stop() {
        if (thread_.joinable()) {
            stop_.store(true);
            thread_.join();
            poll(now());
        }
    }

    std::vector<EnergySample> samples() const {
        std::lock_guard lk(m_);
        return samples_;
    }

    std::vector<double> epoch_marks() const {
        std::lock_guard lk(m_);
        return marks_;
    }

private:
    static inline std::atomic<bool> active_{false};

    SessionConfig cfg_;
    std::string mode_label_;
    std::vector<std::pair<Component, WrapCounter>> counters_;
    mutable std::mutex m_;
    std::vector<EnergySample> samples_;
    std::vector<double> marks_;
    std::thread thread_;
    std::atomic<bool> stop_{false};
};

// ---- integration ------------------------------------------------------------------

namespace energy_detail {

// joules over [a, b] for one component's samples: trapezoid for watt
// samples, cumulative deltas (with linear interpolation at the cut points)
// for joule samples
inline double integrate_window(const std::vector<EnergySample>& s, double a, double b) {
    if (s.size() < 2 || b <= a) return 0.0;
    auto value_at = [&](double t) {
        if (t <= s.front().timestamp) return s.front().value;
        if (t >= s.back().timestamp) return s.back().value;
        for (size_t i = 1; i < s.size(); ++i)
            if (s[i].timestamp >= t) {
                double t0 = s[i - 1].timestamp, t1 = s[i].timestamp;
                double w = t1 > t0 ? (t - t0) / (t1 - t0) : 0.0;
                return s[i - 1].value + w * (s[i].value - s[i - 1].value);
            }
        return s.back().value;
    };
    a = std::max(a, s.front().timestamp);
    b = std::min(b, s.back().timestamp);
    if (b <= a) return 0.0;
    if (s.front().cumulative) return value_at(b) - value_at(a);

    // trapezoid over the clipped window
    double joules = 0.0;
    double prev_t = a, prev_v = value_at(a);
    for (const auto& sample : s) {
        if (sample.timestamp <= a) continue;
        if (sample.timestamp >= b) break;
        joules += 0.5 * (prev_v + sample.value) * (sample.timestamp - prev_t);
        prev_t = sample.timestamp;
        prev_v = sample.value;
    }
    joules += 0.5 * (prev_v + value_at(b)) * (b - prev_t);
    return joules;
}

}  // namespace energy_detail

// Integrates a session's samples to kilojoules per component, splitting the
// series at the supplied epoch boundaries. Components with fewer than two
// samples are dropped with a warning.
inline EnergyReport integrate(const std::vector<EnergySample>& samples,
                              const std::vector<double>& epoch_marks = {},
                              const std::string& mode = "modeled") {
    EnergyReport report;
    report.mode = mode;
    std::map<Component, std::vector<EnergySample>> per;
    for (const auto& s : samples) per[s.component].push_back(s);

    double t0 = std::numeric_limits<double>::max(), t1 = std::numeric_limits<double>::lowest();
    for (auto& [comp, vec] : per) {
        std::stable_sort(vec.begin(), vec.end(),
                         [](const EnergySample& a, const EnergySample& b) {
                             return a.timestamp < b.timestamp;
                         });
        if (vec.size() < 2) {
            report.warnings.push_back(std::string("component ") + component_name(comp) +
                                      " has fewer than 2 samples; omitted");
            continue;
        }
        t0 = std::min(t0, vec.front().timestamp);
        t1 = std::max(t1, vec.back().timestamp);
    }

    for (auto& [comp, vec] : per) {
        if (vec.size() < 2) continue;
        double j = energy_detail::integrate_window(vec, vec.front().timestamp,
                                                   vec.back().timestamp);
        report.component_kj[comp] = j * 1e-3;
        report.total_kj += j * 1e-3;
    }

    if (!epoch_marks.empty() && t0 < t1) {
        std::vector<double> cuts;
        cuts.push_back(t0);
        for (double m : epoch_marks)
            if (m > cuts.back()) cuts.push_back(std::min(m, t1));
        for (size_t e = 0; e + 1 < cuts.size(); ++e) {
            double kj = 0.0;
            for (auto& [comp, vec] : per) {
                if (vec.size() < 2) continue;
                kj += energy_detail::integrate_window(vec, cuts[e], cuts[e + 1]) * 1e-3;
            }
            report.epoch_kj.push_back(kj);
        }
    }
    return report;
}

struct Efficiency {
    double dice_per_total_kj = 0.0;
    double dice_per_epoch_kj = 0.0;
};

inline Efficiency efficiency(double dice, const EnergyReport& report) {
    if (report.total_kj <= 0.0) throw Error("efficiency: report carries zero energy");
    Efficiency e;
    e.dice_per_total_kj = dice / report.total_kj;
    if (!report.epoch_kj.empty()) {
        double mean = 0.0;
        for (double kj : report.epoch_kj) mean += kj;
        mean /= static_cast<double>(report.epoch_kj.size());
        if (mean > 0.0) e.dice_per_epoch_kj = dice / mean;
    }
    return e;
}

}  // namespace gseg::energy
