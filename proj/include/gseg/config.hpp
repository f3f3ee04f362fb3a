#pragma once

#include <fstream>
#include <sstream>

#include "gseg/comm.hpp"
#include "gseg/energy.hpp"
#include "gseg/loader.hpp"
#include "gseg/models.hpp"
#include "gseg/optim.hpp"

namespace gseg::train {

enum class DataSource : uint8_t { Phantoms, Manifest, Slices };

inline const char* data_source_name(DataSource s) {
    switch (s) {
        case DataSource::Phantoms: return "phantoms";
        case DataSource::Manifest: return "manifest";
        case DataSource::Slices: return "slices";
    }
    return "?";
}

// Everything a run needs, declaratively. paper_defaults() carries the
// published protocol values (batch 128 per device, full-size model);
// desk_defaults() scales the same protocol down to something a laptop
// finishes in minutes. Shared knobs (patience 15, plateau 10x/5/1e-6,
// lr 1e-3, <=100 lr-finder steps) are identical in both.
struct RunConfig {
    std::string run_name = "run";
    uint64_t seed = 0;

    nn::ArchSpec arch;
    nn::LossKind loss = nn::LossKind::Dice;
    Precision precision = Precision::F32;

    optim::OptimizerConfig optimizer;
    bool lr_find = false;
    int lr_find_max_steps = 100;
    double lr_plateau_factor = 0.1;
    int lr_plateau_patience = 5;
    double lr_min = 1e-6;

    int max_epochs = 200;
    int early_stop_patience = 15;
    bool augment = true;
    bool swa = false;
    int swa_start_epoch = 10;

    data::LoaderConfig loader;
    int world_size = 1;
    comm::CompressorPolicy compressor;

    DataSource data_source = DataSource::Phantoms;
    int phantom_count = 256;
    int phantom_side = 64;
    double decode_delay_ms = 0.0;
    std::string manifest_path;
    std::string slices_path;
    data::TimePolicy time_policy = data::TimePolicy::AllFrames;
    bool drop_empty_slices = false;

    energy::SessionConfig energy;

    std::string log_path;         // JSONL run log (empty: no file)
    std::string checkpoint_path;  // best-parameters dump (empty: no file)

    static RunConfig desk_defaults() {
        RunConfig c;
        c.arch.family = nn::Family::AttnSqueezeUNet;
        c.arch.base_channels = 8;
        c.arch.depth = 3;
        c.loader.batch_size = 16;
        c.phantom_count = 256;
        c.phantom_side = 64;
        return c;
    }

    static RunConfig paper_defaults() {
        RunConfig c;
        c.arch.family = nn::Family::AttnSqueezeUNet;
        c.arch.base_channels = 64;
        c.arch.depth = 5;
        c.loader.batch_size = 128;  // per device
        c.loader.workers = 6;
        c.loader.prefetch_per_worker = 2;
        c.loader.persistent_workers = true;
        c.loader.cache = true;
        return c;
    }

    void validate() const {
        arch.validate();
        loader.validate();
        if (max_epochs < 1) throw Error("config: max_epochs must be >= 1");
        if (world_size < 1) throw Error("config: world_size must be >= 1");
        if (loader.batch_size % world_size != 0)
            throw Error("config: batch_size must divide evenly across world_size");
        if (early_stop_patience < 1) throw Error("config: early_stop_patience must be >= 1");
        if (lr_plateau_patience < 1) throw Error("config: lr_plateau_patience must be >= 1");
        if (lr_plateau_factor <= 0.0 || lr_plateau_factor >= 1.0)
            throw Error("config: lr_plateau_factor must sit inside (0, 1)");
        if (lr_min <= 0.0) throw Error("config: lr_min must be positive");
        if (lr_find_max_steps < 1) throw Error("config: lr_find_max_steps must be >= 1");
        if (phantom_side < 16) throw Error("config: phantom_side must be >= 16");
        if (phantom_side % arch.min_side() != 0)
            throw Error("config: phantom_side must be divisible by 2^(depth-1)");
        if (data_source == DataSource::Manifest && manifest_path.empty())
            throw Error("config: manifest data source needs manifest_path");
        if (data_source == DataSource::Slices && slices_path.empty())
            throw Error("config: slices data source needs slices_path");
    }
};

// ---- key = value config file ------------------------------------------------------

// Line-oriented format: [section] headers, `key = value` pairs, '#' comments.
// Unknown keys are errors (typos should not silently train the wrong thing).
namespace config_detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw FormatError("config: bad boolean '" + v + "' for " + key);
}

}  // namespace config_detail

inline void apply_config_entry(RunConfig& cfg, const std::string& section,
                               const std::string& key, const std::string& value) {
    using config_detail::parse_bool;
    const std::string full = section.empty() ? key : section + "." + key;
    auto to_i = [&] { return std::stoll(value); };
    auto to_f = [&] { return std::stod(value); };

    if (full == "run.name") cfg.run_name = value;
    else if (full == "run.seed") cfg.seed = static_cast<uint64_t>(to_i());
    else if (full == "run.max_epochs") cfg.max_epochs = static_cast<int>(to_i());
    else if (full == "run.early_stop_patience") cfg.early_stop_patience = static_cast<int>(to_i());
    else if (full == "run.augment") cfg.augment = parse_bool(value, full);
    else if (full == "run.swa") cfg.swa = parse_bool(value, full);
    else if (full == "run.swa_start_epoch") cfg.swa_start_epoch = static_cast<int>(to_i());
    else if (full == "run.precision")
        cfg.precision = value == "f16" ? Precision::F16Emu : Precision::F32;
    else if (full == "run.log_path") cfg.log_path = value;
    else if (full == "run.checkpoint_path") cfg.checkpoint_path = value;
    else if (full == "arch.family") cfg.arch.family = nn::family_from_string(value);
    else if (full == "arch.base_channels") cfg.arch.base_channels = static_cast<int>(to_i());
    else if (full == "arch.depth") cfg.arch.depth = static_cast<int>(to_i());
    else if (full == "arch.in_channels") cfg.arch.in_channels = static_cast<int>(to_i());
    else if (full == "arch.out_channels") cfg.arch.out_channels = static_cast<int>(to_i());
    else if (full == "loss.kind") cfg.loss = nn::loss_from_string(value);
    else if (full == "optimizer.kind") {
        auto lr = cfg.optimizer.lr;
        auto kind = optim::opt_from_string(value);
        cfg.optimizer = kind == optim::OptKind::Novograd ? optim::OptimizerConfig::novograd_defaults()
                        : kind == optim::OptKind::Sgd    ? optim::OptimizerConfig::sgd_defaults()
                                                         : optim::OptimizerConfig::adam_defaults();
        cfg.optimizer.lr = lr;
    } else if (full == "optimizer.lr") cfg.optimizer.lr = static_cast<float>(to_f());
    else if (full == "optimizer.beta1") cfg.optimizer.beta1 = static_cast<float>(to_f());
    else if (full == "optimizer.beta2") cfg.optimizer.beta2 = static_cast<float>(to_f());
    else if (full == "optimizer.eps") cfg.optimizer.eps = static_cast<float>(to_f());
    else if (full == "optimizer.weight_decay") cfg.optimizer.weight_decay = static_cast<float>(to_f());
    else if (full == "optimizer.amsgrad") cfg.optimizer.amsgrad = parse_bool(value, full);
    else if (full == "optimizer.lr_find") cfg.lr_find = parse_bool(value, full);
    else if (full == "optimizer.lr_find_max_steps") cfg.lr_find_max_steps = static_cast<int>(to_i());
    else if (full == "optimizer.lr_plateau_factor") cfg.lr_plateau_factor = to_f();
    else if (full == "optimizer.lr_plateau_patience") cfg.lr_plateau_patience = static_cast<int>(to_i());
    else if (full == "optimizer.lr_min") cfg.lr_min = to_f();
    else if (full == "loader.workers") cfg.loader.workers = static_cast<int>(to_i());
    else if (full == "loader.prefetch_per_worker") cfg.loader.prefetch_per_worker = static_cast<int>(to_i());
    else if (full == "loader.persistent_workers") cfg.loader.persistent_workers = parse_bool(value, full);
    else if (full == "loader.cache") cfg.loader.cache = parse_bool(value, full);
    else if (full == "loader.batch_size") cfg.loader.batch_size = static_cast<int>(to_i());
    else if (full == "ddp.world_size") cfg.world_size = static_cast<int>(to_i());
    else if (full == "ddp.compressor") cfg.compressor.kind = comm::compressor_from_string(value);
    else if (full == "ddp.powersgd_rank") cfg.compressor.powersgd_rank = static_cast<int>(to_i());
    else if (full == "data.source") {
        if (value == "phantoms") cfg.data_source = DataSource::Phantoms;
        else if (value == "manifest") cfg.data_source = DataSource::Manifest;
        else if (value == "slices") cfg.data_source = DataSource::Slices;
        else throw FormatError("config: unknown data source '" + value + "'");
    } else if (full == "data.phantom_count") cfg.phantom_count = static_cast<int>(to_i());
    else if (full == "data.phantom_side") cfg.phantom_side = static_cast<int>(to_i());
    else if (full == "data.decode_delay_ms") cfg.decode_delay_ms = to_f();
    else if (full == "data.manifest_path") cfg.manifest_path = value;
    else if (full == "data.slices_path") cfg.slices_path = value;
    else if (full == "data.time_policy")
        cfg.time_policy = value == "first_frame" ? data::TimePolicy::FirstFrame
                                                 : data::TimePolicy::AllFrames;
    else if (full == "data.drop_empty_slices") cfg.drop_empty_slices = parse_bool(value, full);
    else if (full == "energy.mode")
        cfg.energy.mode =
            value == "counters" ? energy::MeterMode::Counters : energy::MeterMode::Modeled;
    else if (full == "energy.cpu_watts") cfg.energy.modeled_watts[energy::Component::Cpu] = to_f();
    else if (full == "energy.gpu_watts") cfg.energy.modeled_watts[energy::Component::Gpu] = to_f();
    else if (full == "energy.ram_watts") cfg.energy.modeled_watts[energy::Component::Ram] = to_f();
    else if (full == "energy.interval_ms") cfg.energy.interval_ms = static_cast<int>(to_i());
    else if (full == "energy.powercap_root") cfg.energy.powercap_root = value;
    else throw FormatError("config: unknown key '" + full + "'");
}

inline RunConfig parse_config(std::istream& is, RunConfig base = RunConfig::desk_defaults()) {
    using config_detail::trim;
    RunConfig cfg = base;
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw FormatError("config: malformed section at line " + std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("config: expected 'key = value' at line " + std::to_string(lineno));
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        try {
            apply_config_entry(cfg, section, key, value);
        } catch (const FormatError&) {
            throw;
        } catch (const std::exception& e) {
            throw FormatError("config: line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

inline RunConfig load_config(const std::string& path,
                             RunConfig base = RunConfig::desk_defaults()) {
    std::ifstream is(path);
    if (!is) throw Error("config: cannot open '" + path + "'");
    return parse_config(is, base);
}

inline std::string config_to_string(const RunConfig& c) {
    std::ostringstream os;
    os << "[run]\n";
    os << "name = " << c.run_name << "\n";
    os << "seed = " << c.seed << "\n";
    os << "max_epochs = " << c.max_epochs << "\n";
    os << "early_stop_patience = " << c.early_stop_patience << "\n";
    os << "augment = " << (c.augment ? "true" : "false") << "\n";
    os << "swa = " << (c.swa ? "true" : "false") << "\n";
    os << "swa_start_epoch = " << c.swa_start_epoch << "\n";
    os << "precision = " << (c.precision == Precision::F16Emu ? "f16" : "f32") << "\n";
    os << "\n[arch]\n";
    os << "family = " << nn::family_name(c.arch.family) << "\n";
    os << "base_channels = " << c.arch.base_channels << "\n";
    os << "depth = " << c.arch.depth << "\n";
    os << "in_channels = " << c.arch.in_channels << "\n";
    os << "out_channels = " << c.arch.out_channels << "\n";
    os << "\n[loss]\nkind = " << nn::loss_name(c.loss) << "\n";
    os << "\n[optimizer]\n";
    os << "kind = " << optim::opt_name(c.optimizer.kind) << "\n";
    os << "lr = " << c.optimizer.lr << "\n";
    os << "beta1 = " << c.optimizer.beta1 << "\n";
    os << "beta2 = " << c.optimizer.beta2 << "\n";
    os << "weight_decay = " << c.optimizer.weight_decay << "\n";
    os << "amsgrad = " << (c.optimizer.amsgrad ? "true" : "false") << "\n";
    os << "lr_find = " << (c.lr_find ? "true" : "false") << "\n";
    os << "lr_find_max_steps = " << c.lr_find_max_steps << "\n";
    os << "lr_plateau_factor = " << c.lr_plateau_factor << "\n";
    os << "lr_plateau_patience = " << c.lr_plateau_patience << "\n";
    os << "lr_min = " << c.lr_min << "\n";
    os << "\n[loader]\n";
    os << "workers = " << c.loader.workers << "\n";
    os << "prefetch_per_worker = " << c.loader.prefetch_per_worker << "\n";
    os << "persistent_workers = " << (c.loader.persistent_workers ? "true" : "false") << "\n";
    os << "cache = " << (c.loader.cache ? "true" : "false") << "\n";
    os << "batch_size = " << c.loader.batch_size << "\n";
    os << "\n[ddp]\n";
    os << "world_size = " << c.world_size << "\n";
    os << "compressor = " << comm::compressor_name(c.compressor.kind) << "\n";
    os << "powersgd_rank = " << c.compressor.powersgd_rank << "\n";
    os << "\n[data]\n";
    os << "source = " << data_source_name(c.data_source) << "\n";
    os << "phantom_count = " << c.phantom_count << "\n";
    os << "phantom_side = " << c.phantom_side << "\n";
    if (!c.manifest_path.empty()) os << "manifest_path = " << c.manifest_path << "\n";
    if (!c.slices_path.empty()) os << "slices_path = " << c.slices_path << "\n";
    os << "\n[energy]\n";
    os << "mode = " << (c.energy.mode == energy::MeterMode::Counters ? "counters" : "modeled")
       << "\n";
    for (const auto& [comp, watts] : c.energy.modeled_watts)
        os << energy::component_name(comp) << "_watts = " << watts << "\n";
    os << "interval_ms = " << c.energy.interval_ms << "\n";
    return os.str();
}

}  // namespace gseg::train
