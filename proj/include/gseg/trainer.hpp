#pragma once

#include <json.hpp>

#include "gseg/config.hpp"
#include "gseg/losses.hpp"

namespace gseg::train {

// true iff the best epoch lies at least `patience` epochs in the past
inline bool early_stop_check(const std::vector<double>& val_loss_history, int patience) {
    if (val_loss_history.empty()) return false;
    size_t best = 0;
    for (size_t i = 1; i < val_loss_history.size(); ++i)
        if (val_loss_history[i] < val_loss_history[best]) best = i;
    return val_loss_history.size() - 1 - best >= static_cast<size_t>(patience);
}

// Decays the learning rate by `factor` after `patience` consecutive
// non-improving epochs, clamped at `min_lr`. The counter resets on decay and
// on improvement.
class LrPlateau {
public:
    LrPlateau(double factor = 0.1, int patience = 5, double min_lr = 1e-6)
        : factor_(factor), patience_(patience), min_lr_(min_lr) {}

    double step(double lr, double val_loss) {
        if (!seen_any_ || val_loss < best_) {
            best_ = val_loss;
            bad_ = 0;
            seen_any_ = true;
            return lr;
        }
        if (++bad_ >= patience_) {
            bad_ = 0;
            return std::max(lr * factor_, min_lr_);
        }
        return lr;
    }

private:
    double factor_;
    int patience_;
    double min_lr_;
    double best_ = 0.0;
    int bad_ = 0;
    bool seen_any_ = false;
};

struct LrFindResult {
    double suggestion = 0.0;
    std::vector<std::pair<double, double>> sweep;  // (lr, smoothed loss)
    int steps = 0;
    bool degenerate = false;  // fewer than 2 points: suggestion is the sweep start
};

// Exponential sweep 1e-6 -> 1 over at most 100 steps on a throwaway copy of
// the parameters. The suggestion is the lr at the steepest descent of the
// EMA-smoothed loss (beta 0.98, debiased), divided by 10; the sweep breaks
// off once the smoothed loss explodes past 4x its best.
inline LrFindResult lr_find_sweep(const ComputeGraph& train_graph, ParamStore params,
                                  const std::vector<TensorMap>& batches,
                                  optim::OptimizerConfig opt_cfg, int max_steps = 100,
                                  const std::string& loss_output = "loss") {
    max_steps = std::min(max_steps, 100);  // beyond 100 steps: cost, no gain
    if (max_steps < 1) throw Error("lr_find: needs at least one step");
    if (batches.empty()) throw Error("lr_find: no batches supplied");

    Executor ex(train_graph);
    optim::Optimizer opt(opt_cfg);

    const double lo = 1e-6, hi = 1.0;
    LrFindResult result;
    double ema = 0.0;
    const double beta = 0.98;
    double best_smoothed = std::numeric_limits<double>::max();
    bool any_finite = false;

    for (int step = 0; step < max_steps; ++step) {
        double lr = lo * std::pow(hi / lo, max_steps > 1
                                               ? static_cast<double>(step) / (max_steps - 1)
                                               : 0.0);
        opt.set_lr(static_cast<float>(lr));
        ExecOptions eopt;
        eopt.training = true;
        const TensorMap& batch = batches[static_cast<size_t>(step) % batches.size()];
        ex.forward(batch, params, eopt);
        double loss = ex.scalar_f64(loss_output);
        if (std::isfinite(loss)) any_finite = true;

        ema = beta * ema + (1.0 - beta) * loss;
        double smoothed = ema / (1.0 - std::pow(beta, step + 1));
        result.sweep.push_back({lr, smoothed});
        ++result.steps;
        if (std::isfinite(smoothed)) best_smoothed = std::min(best_smoothed, smoothed);
        if (!std::isfinite(loss) || (step > 5 && smoothed > 4.0 * best_smoothed)) break;

        opt.step(params, ex.backward(loss_output));
    }
    if (!any_finite)
        throw Error("lr_find: every probed loss was non-finite; pick the rate manually");

    if (result.sweep.size() < 2) {
        result.degenerate = true;
        result.suggestion = lo;
        return result;
    }
    double steepest = 0.0;
    size_t at = 0;
    for (size_t i = 1; i < result.sweep.size(); ++i) {
        double dlog = std::log(result.sweep[i].first) - std::log(result.sweep[i - 1].first);
        double slope = (result.sweep[i].second - result.sweep[i - 1].second) / dlog;
        if (slope < steepest) {
            steepest = slope;
            at = i;
        }
    }
    result.suggestion = result.sweep[at].first / 10.0;
    return result;
}

inline LrFindResult lr_find(const nn::Model& model, nn::LossKind loss_kind,
                            data::BatchLoader& loader, optim::OptimizerConfig opt_cfg,
                            int max_steps = 100) {
    ComputeGraph graph = nn::with_loss(model, loss_kind);
    std::vector<TensorMap> batches;
    loader.run_epoch(0, [&](data::SegBatch&& b) {
        if (static_cast<int>(batches.size()) < std::min(max_steps, 100))
            batches.push_back({{"image", std::move(b.images)}, {"mask", std::move(b.masks)}});
    });
    return lr_find_sweep(graph, model.params, batches, opt_cfg, max_steps);
}

// ---- run log ------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_dice = 0.0;
    double lr = 0.0;
    double wall_seconds = 0.0;
    double kj = 0.0;
};

struct RunLog {
    std::string run_name;
    std::string arch;
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;
    double test_dice = 0.0;
    double test_iou = 0.0;
    int64_t params = 0;
    std::string eval_source = "best";  // best checkpoint or swa average
    double dice_per_kj = 0.0;
    double dice_per_epoch_kj = 0.0;
    size_t bytes_raw = 0;
    size_t bytes_compressed = 0;
    energy::EnergyReport energy;
    std::string config_snapshot;

    nlohmann::json to_json_lines() const {
        nlohmann::json lines = nlohmann::json::array();
        lines.push_back({{"type", "config"},
                         {"run", run_name},
                         {"arch", arch},
                         {"snapshot", config_snapshot}});
        for (const auto& e : epochs)
            lines.push_back({{"type", "epoch"},
                             {"epoch", e.epoch},
                             {"train_loss", e.train_loss},
                             {"val_loss", e.val_loss},
                             {"val_dice", e.val_dice},
                             {"lr", e.lr},
                             {"wall_seconds", e.wall_seconds},
                             {"kj", e.kj}});
        nlohmann::json comp = nlohmann::json::object();
        for (const auto& [c, kj] : energy.component_kj) comp[energy::component_name(c)] = kj;
        lines.push_back({{"type", "energy"},
                         {"mode", energy.mode},
                         {"total_kj", energy.total_kj},
                         {"component_kj", comp},
                         {"epoch_kj", energy.epoch_kj}});
        lines.push_back({{"type", "final"},
                         {"best_epoch", best_epoch},
                         {"test_dice", test_dice},
                         {"test_iou", test_iou},
                         {"params", params},
                         {"eval_source", eval_source},
                         {"dice_per_kj", dice_per_kj},
                         {"dice_per_epoch_kj", dice_per_epoch_kj},
                         {"bytes_raw", bytes_raw},
                         {"bytes_compressed", bytes_compressed}});
        return lines;
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw Error("runlog: cannot open '" + path + "' for writing");
        for (const auto& line : to_json_lines()) os << line.dump() << "\n";
    }

    static RunLog load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw Error("runlog: cannot open '" + path + "'");
        RunLog log;
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            nlohmann::json j = nlohmann::json::parse(line);
            std::string type = j.value("type", "");
            if (type == "config") {
                log.run_name = j.value("run", "");
                log.arch = j.value("arch", "");
                log.config_snapshot = j.value("snapshot", "");
            } else if (type == "epoch") {
                EpochRecord e;
                e.epoch = j.value("epoch", 0);
                e.train_loss = j.value("train_loss", 0.0);
                e.val_loss = j.value("val_loss", 0.0);
                e.val_dice = j.value("val_dice", 0.0);
                e.lr = j.value("lr", 0.0);
                e.wall_seconds = j.value("wall_seconds", 0.0);
                e.kj = j.value("kj", 0.0);
                log.epochs.push_back(e);
            } else if (type == "energy") {
                log.energy.mode = j.value("mode", "");
                log.energy.total_kj = j.value("total_kj", 0.0);
                log.energy.epoch_kj = j.value("epoch_kj", std::vector<double>{});
            } else if (type == "final") {
                log.best_epoch = j.value("best_epoch", -1);
                log.test_dice = j.value("test_dice", 0.0);
                log.test_iou = j.value("test_iou", 0.0);
                log.params = j.value("params", int64_t{0});
                log.eval_source = j.value("eval_source", "best");
                log.dice_per_kj = j.value("dice_per_kj", 0.0);
                log.dice_per_epoch_kj = j.value("dice_per_epoch_kj", 0.0);
                log.bytes_raw = j.value("bytes_raw", size_t{0});
                log.bytes_compressed = j.value("bytes_compressed", size_t{0});
            }
        }
        return log;
    }
};

// ---- dataset assembly ----------------------------------------------------------------

inline std::vector<data::SlicePair> assemble_slices(const RunConfig& cfg) {
    switch (cfg.data_source) {
        case DataSource::Phantoms:
            return data::generate_phantoms(cfg.phantom_count, cfg.phantom_side, cfg.seed);
        case DataSource::Slices:
            return data::load_slices(cfg.slices_path);
        case DataSource::Manifest: {
            std::vector<data::SlicePair> out;
            for (const auto& entry : data::read_manifest(cfg.manifest_path)) {
                data::Volume raw = data::read_nifti(entry.raw_path);
                data::Volume mask = data::read_nifti(entry.mask_path);
                auto slices = data::extract_and_slice(raw, mask, cfg.time_policy,
                                                      entry.patient_id, cfg.drop_empty_slices);
                out.insert(out.end(), std::make_move_iterator(slices.begin()),
                           std::make_move_iterator(slices.end()));
            }
            return out;
        }
    }
    throw Error("config: unhandled data source");
}

// ---- evaluation ----------------------------------------------------------------------

struct EvalResult {
    double loss = 0.0;
    double dice = 0.0;
    double iou = 0.0;
};

inline EvalResult evaluate(const ComputeGraph& train_graph, ParamStore& params,
                           data::BatchLoader& loader, Precision precision) {
    Executor ex(train_graph);
    ExecOptions opt;
    opt.training = false;
    opt.precision = precision;
    EvalResult acc;
    size_t batches = 0;
    double dice_sum = 0.0, iou_sum = 0.0;
    loader.run_epoch(0, [&](data::SegBatch&& b) {
        TensorMap in{{"image", std::move(b.images)}, {"mask", b.masks}};
        auto out = ex.forward(in, params, opt);
        acc.loss += ex.scalar_f64("loss");
        dice_sum += nn::dice_score(out.at("prob"), b.masks);
        iou_sum += nn::iou_score(out.at("prob"), b.masks);
        ++batches;
    });
    if (batches == 0) throw Error("evaluate: empty loader");
    acc.loss /= static_cast<double>(batches);
    acc.dice = dice_sum / static_cast<double>(batches);
    acc.iou = iou_sum / static_cast<double>(batches);
    return acc;
}

// ---- the training driver ---------------------------------------------------------------

// Full pipeline: data split/load, optional lr finder, epoch loop with
// augmentation and (optionally compressed) multi-rank steps, plateau decay,
// SWA collection, early stopping, an energy session spanning exactly the
// training interval, best-checkpoint test evaluation, and the run log.
inline RunLog train(const RunConfig& cfg_in) {
    RunConfig cfg = cfg_in;
    cfg.validate();

    RunLog log;
    log.run_name = cfg.run_name;
    log.arch = nn::family_name(cfg.arch.family);
    log.config_snapshot = config_to_string(cfg);

    auto slices = assemble_slices(cfg);
    auto split = data::split_by_patient(slices, cfg.seed);

    data::SliceDataset train_ds(std::move(split.train), cfg.decode_delay_ms);
    data::SliceDataset val_ds(std::move(split.val), cfg.decode_delay_ms);
    data::SliceDataset test_ds(std::move(split.test), cfg.decode_delay_ms);

    data::LoaderConfig train_cfg = cfg.loader;
    train_cfg.shuffle_seed = static_cast<int64_t>(cfg.seed);
    data::SampleTransform aug;
    if (cfg.augment)
        aug = [](const data::SlicePair& sp, Rng& rng) { return data::augment(sp, rng); };
    data::BatchLoader train_loader(train_ds, train_cfg, aug);

    data::LoaderConfig eval_cfg = cfg.loader;
    eval_cfg.shuffle_seed = -1;  // stable order, no augmentation
    eval_cfg.workers = 0;
    eval_cfg.persistent_workers = false;
    data::BatchLoader val_loader(val_ds, eval_cfg);
    data::BatchLoader test_loader(test_ds, eval_cfg);

    auto model = nn::build_model(cfg.arch, cfg.seed);
    log.params = param_count(model.params);
    ComputeGraph train_graph = nn::with_loss(model, cfg.loss);

    if (cfg.lr_find) {
        auto found = lr_find(model, cfg.loss, train_loader, cfg.optimizer, cfg.lr_find_max_steps);
        cfg.optimizer.lr = static_cast<float>(found.suggestion);
    }

    comm::RankGroup group(train_graph, model.params, cfg.world_size, cfg.optimizer,
                          cfg.compressor);

    energy::EnergySession session(cfg.energy);
    session.start_background();
    session.poll(energy::EnergySession::now());

    std::vector<double> val_history;
    double best_val = std::numeric_limits<double>::max();
    ParamStore best_params = group.replica(0);
    optim::SwaState swa;
    swa.swa_start_epoch = cfg.swa_start_epoch;
    LrPlateau plateau(cfg.lr_plateau_factor, cfg.lr_plateau_patience, cfg.lr_min);
    double lr = cfg.optimizer.lr;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        auto wall0 = std::chrono::steady_clock::now();
        double train_loss = 0.0;
        size_t steps = 0;

        train_loader.run_epoch(epoch, [&](data::SegBatch&& b) {
            int64_t n = b.size();
            if (cfg.world_size > 1 && n % cfg.world_size != 0) {
                // ragged tail cannot shard evenly; run it single-rank style on
                // every replica via a world-size-1 step would desync; skip it
                return;
            }
            std::vector<TensorMap> shards;
            if (cfg.world_size == 1) {
                shards.push_back({{"image", std::move(b.images)}, {"mask", std::move(b.masks)}});
            } else {
                int64_t per = n / cfg.world_size;
                int64_t chw = b.images.numel() / n;
                for (int r = 0; r < cfg.world_size; ++r) {
                    TensorMap s;
                    for (const auto* src : {&b.images, &b.masks}) {
                        Tensor part({per, src->shape[1], src->shape[2], src->shape[3]});
                        std::copy(src->data.begin() + static_cast<size_t>(r * per * chw),
                                  src->data.begin() + static_cast<size_t>((r + 1) * per * chw),
                                  part.data.begin());
                        s[src == &b.images ? "image" : "mask"] = std::move(part);
                    }
                    shards.push_back(std::move(s));
                }
            }
            for (int r = 0; r < cfg.world_size; ++r) group.optimizer(r).set_lr(static_cast<float>(lr));
            auto metrics = group.train_step(shards);
            log.bytes_raw += metrics.bytes_raw;
            log.bytes_compressed += metrics.bytes_compressed;
            train_loss += metrics.loss;
            ++steps;
        });
        if (steps == 0) throw Error("train: no full batches this epoch");
        train_loss /= static_cast<double>(steps);

        auto val = evaluate(train_graph, group.replica(0), val_loader, cfg.precision);
        val_history.push_back(val.loss);
        if (val.loss < best_val) {
            best_val = val.loss;
            best_params = group.replica(0);
            log.best_epoch = epoch;
        }
        if (cfg.swa && epoch >= cfg.swa_start_epoch) swa.update(group.replica(0));

        double new_lr = plateau.step(lr, val.loss);
        lr = new_lr;

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = train_loss;
        rec.val_loss = val.loss;
        rec.val_dice = val.dice;
        rec.lr = lr;
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
        session.poll(energy::EnergySession::now());
        session.mark_epoch(energy::EnergySession::now());
        log.epochs.push_back(rec);

        if (early_stop_check(val_history, cfg.early_stop_patience)) break;
    }

    session.stop();
    log.energy = energy::integrate(session.samples(), session.epoch_marks(),
                                   session.mode_label());
    for (size_t e = 0; e < log.epochs.size() && e < log.energy.epoch_kj.size(); ++e)
        log.epochs[e].kj = log.energy.epoch_kj[e];

    ParamStore final_params = best_params;
    if (cfg.swa && swa.n_models > 0) {
        swa.apply(final_params);
        log.eval_source = "swa";
    }
    auto test = evaluate(train_graph, final_params, test_loader, cfg.precision);
    log.test_dice = test.dice;
    log.test_iou = test.iou;

    if (log.energy.total_kj > 0.0) {
        auto eff = energy::efficiency(log.test_dice, log.energy);
        log.dice_per_kj = eff.dice_per_total_kj;
        log.dice_per_epoch_kj = eff.dice_per_epoch_kj;
    }

    if (!cfg.checkpoint_path.empty()) checkpoint::write(cfg.checkpoint_path, final_params);
    if (!cfg.log_path.empty()) log.save(cfg.log_path);
    return log;
}

}  // namespace gseg::train
