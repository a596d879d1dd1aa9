#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "klaad/checkpoint.hpp"
#include "klaad/common.hpp"
#include "klaad/corpus.hpp"
#include "klaad/model.hpp"
#include "klaad/objective.hpp"

namespace klaad {

enum class Ablation { drop_ce, drop_kl, drop_triplet };
enum class OptimizerKind { sgd, adam };

inline const char* to_string(Ablation a) {
    switch (a) {
        case Ablation::drop_ce: return "drop_ce";
        case Ablation::drop_kl: return "drop_kl";
        case Ablation::drop_triplet: return "drop_triplet";
    }
    return "?";
}

inline Ablation ablation_from_string(const std::string& s) {
    if (s == "drop_ce" || s == "ce") return Ablation::drop_ce;
    if (s == "drop_kl" || s == "kl") return Ablation::drop_kl;
    if (s == "drop_triplet" || s == "triplet") return Ablation::drop_triplet;
    throw ConfigError("unknown ablation flag: " + s);
}

struct TrainConfig {
    LossWeights weights;
    double learning_rate = 1e-5;
    int epochs = 1;
    int batch_size = 1;
    uint64_t seed = 0;
    std::set<Ablation> ablation;
    KlMode kl_mode = KlMode::head_mean;
    PoolMethod pool_method = PoolMethod::mean;
    bool stop_grad_anti = true;
    OptimizerKind optimizer = OptimizerKind::sgd;
    double grad_clip = 0.0;  // 0 disables clipping

    // Ablated terms are forced to weight zero; everything else is the
    // configured weight.
    LossWeights effective_weights() const {
        LossWeights w = weights;
        if (ablation.count(Ablation::drop_ce)) w.lambda1 = 0.0;
        if (ablation.count(Ablation::drop_kl)) w.lambda2 = 0.0;
        if (ablation.count(Ablation::drop_triplet)) w.lambda3 = 0.0;
        return w;
    }

    void validate() const {
        weights.validate();
        if (!(learning_rate > 0.0)) throw ConfigError("TrainConfig: learning_rate must be > 0");
        if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
        if (ablation.size() > 2)
            throw ConfigError("TrainConfig: at most two ablation flags may be set");
        const LossWeights w = effective_weights();
        if (w.lambda1 == 0.0 && w.lambda2 == 0.0 && w.lambda3 == 0.0)
            throw ConfigError("TrainConfig: all loss terms have zero weight");
        if (grad_clip < 0.0) throw ConfigError("TrainConfig: grad_clip must be >= 0");
    }
};

struct StepRecord {
    long step = 0;
    LossBreakdown loss;
};

struct TrainReport {
    std::vector<StepRecord> steps;
    double final_val_ce = std::numeric_limits<double>::quiet_NaN();
    double final_val_kl = std::numeric_limits<double>::quiet_NaN();
    double wall_clock_seconds = 0.0;  // never serialized into deterministic reports
    std::string checkpoint_path;
};

struct TrainAbortError : NumericError {
    TrainAbortError(long step_, const std::string& what_, const LossBreakdown& last_)
        : NumericError("training aborted at step " + std::to_string(step_) + ": " + what_),
          step(step_),
          last(last_) {}
    long step;
    LossBreakdown last;
};

namespace detail {

template <typename S>
void scale_params(ModelParams<S>& p, S factor) {
    visit_params(p, [&](const std::string&, Mat<S>& m) {
        for (auto& v : m.data) v *= factor;
    });
}

template <typename S>
double grad_norm(const ModelParams<S>& p) {
    double acc = 0.0;
    visit_params(p, [&](const std::string&, const Mat<S>& m) {
        for (S v : m.data) acc += static_cast<double>(v) * static_cast<double>(v);
    });
    return std::sqrt(acc);
}

inline std::vector<size_t> epoch_permutation(size_t n, uint64_t seed, int epoch) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(epoch + 1)));
    for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<size_t>(rng() % i)]);
    return order;
}

}  // namespace detail

// Frozen-parameter validation pass: mean CE and mean attention KL over
// the validation triplets.
template <typename S>
std::pair<double, double> validate_metrics(const TransformerModel<S>& model,
                                           const std::vector<Triplet>& val_set,
                                           const TrainConfig& config) {
    if (val_set.empty()) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        return {nan, nan};
    }
    ObjectiveOptions opt{config.kl_mode, config.pool_method, config.stop_grad_anti};
    double ce = 0.0, kl = 0.0;
    for (const auto& t : val_set) {
        const LossBreakdown b =
            triplet_objective<S>(model, t, config.effective_weights(), opt, nullptr);
        ce += b.ce;
        kl += b.kl;
    }
    const double n = static_cast<double>(val_set.size());
    return {ce / n, kl / n};
}

using StepCallback = std::function<void(const StepRecord&)>;

// One KLAAD fine-tuning run. Steps before start_step are skipped without
// touching the model, which makes checkpoint resumption bit-exact when
// the optimizer state is restored alongside the parameters.
template <typename S>
TrainReport train(TransformerModel<S>& model, const std::vector<Triplet>& train_set,
                  const std::vector<Triplet>& val_set, const TrainConfig& config,
                  const StepCallback& on_step = nullptr, long start_step = 0,
                  AdamState<S>* adam = nullptr) {
    config.validate();
    if (train_set.empty()) throw InputError("train: empty training set");

    const auto t_begin = std::chrono::steady_clock::now();
    const LossWeights weights = config.effective_weights();
    const ObjectiveOptions opt{config.kl_mode, config.pool_method, config.stop_grad_anti};

    AdamState<S> local_adam;
    if (config.optimizer == OptimizerKind::adam && adam == nullptr) {
        local_adam.m = model.zero_grads();
        local_adam.v = model.zero_grads();
        adam = &local_adam;
    }

    TrainReport report;
    long step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = detail::epoch_permutation(train_set.size(), config.seed, epoch);
        for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(config.batch_size)) {
            const size_t batch_end =
                std::min(order.size(), pos + static_cast<size_t>(config.batch_size));
            if (step < start_step) {
                ++step;
                continue;
            }

            auto grads = model.zero_grads();
            LossBreakdown mean{};
            const double inv_batch = 1.0 / static_cast<double>(batch_end - pos);
            for (size_t i = pos; i < batch_end; ++i) {
                LossBreakdown b;
                try {
                    b = triplet_objective<S>(model, train_set[order[i]], weights, opt, &grads);
                } catch (const NumericError& e) {
                    throw TrainAbortError(step, e.what(), mean);
                }
                mean.ce += b.ce * inv_batch;
                mean.kl += b.kl * inv_batch;
                mean.triplet += b.triplet * inv_batch;
            }
            // Recompose the logged total from the term means so the
            // breakdown identity holds exactly at any batch size.
            try {
                mean = composite(mean.ce, mean.kl, mean.triplet, weights);
            } catch (const NumericError& e) {
                throw TrainAbortError(step, e.what(), mean);
            }
            if (!std::isfinite(mean.total)) throw TrainAbortError(step, "non-finite loss", mean);
            detail::scale_params(grads, static_cast<S>(inv_batch));

            if (config.grad_clip > 0.0) {
                const double norm = detail::grad_norm(grads);
                if (norm > config.grad_clip)
                    detail::scale_params(grads, static_cast<S>(config.grad_clip / norm));
            }

            const S lr = static_cast<S>(config.learning_rate);
            if (config.optimizer == OptimizerKind::sgd) {
                // Flat walk: params and grads share the visit order.
                std::vector<Mat<S>*> pm, gmat;
                visit_params(model.params(), [&](const std::string&, Mat<S>& m) { pm.push_back(&m); });
                visit_params(grads, [&](const std::string&, Mat<S>& m) { gmat.push_back(&m); });
                for (size_t k = 0; k < pm.size(); ++k)
                    for (size_t e = 0; e < pm[k]->data.size(); ++e)
                        pm[k]->data[e] -= lr * gmat[k]->data[e];
            } else {
                adam->t += 1;
                const S beta1 = S(0.9), beta2 = S(0.999), eps = S(1e-8);
                const S bc1 = S(1) - static_cast<S>(std::pow(0.9, static_cast<double>(adam->t)));
                const S bc2 = S(1) - static_cast<S>(std::pow(0.999, static_cast<double>(adam->t)));
                std::vector<Mat<S>*> pm, gmat, mm, vm;
                visit_params(model.params(), [&](const std::string&, Mat<S>& m) { pm.push_back(&m); });
                visit_params(grads, [&](const std::string&, Mat<S>& m) { gmat.push_back(&m); });
                visit_params(adam->m, [&](const std::string&, Mat<S>& m) { mm.push_back(&m); });
                visit_params(adam->v, [&](const std::string&, Mat<S>& m) { vm.push_back(&m); });
                for (size_t k = 0; k < pm.size(); ++k) {
                    for (size_t e = 0; e < pm[k]->data.size(); ++e) {
                        const S g = gmat[k]->data[e];
                        S& m = mm[k]->data[e];
                        S& v = vm[k]->data[e];
                        m = beta1 * m + (S(1) - beta1) * g;
                        v = beta2 * v + (S(1) - beta2) * g * g;
                        const S mhat = m / bc1;
                        const S vhat = v / bc2;
                        pm[k]->data[e] -= lr * mhat / (std::sqrt(vhat) + eps);
                    }
                }
            }

            report.steps.push_back(StepRecord{step, mean});
            if (on_step) on_step(report.steps.back());
            ++step;
        }
    }

    const auto [val_ce, val_kl] = validate_metrics(model, val_set, config);
    report.final_val_ce = val_ce;
    report.final_val_kl = val_kl;
    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
    return report;
}

// ---- TrainConfig JSON (config.json / checkpoint extra) ----

inline json train_config_to_json(const TrainConfig& c) {
    json ab = json::array();
    for (Ablation a : c.ablation) ab.push_back(to_string(a));
    return json{{"lambda1", c.weights.lambda1},
                {"lambda2", c.weights.lambda2},
                {"lambda3", c.weights.lambda3},
                {"margin", c.weights.margin},
                {"learning_rate", c.learning_rate},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"seed", c.seed},
                {"ablation", ab},
                {"kl_mode", to_string(c.kl_mode)},
                {"pool_method", to_string(c.pool_method)},
                {"stop_grad_anti", c.stop_grad_anti},
                {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
                {"grad_clip", c.grad_clip}};
}

inline TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    if (j.contains("lambda1")) c.weights.lambda1 = j.at("lambda1").get<double>();
    if (j.contains("lambda2")) c.weights.lambda2 = j.at("lambda2").get<double>();
    if (j.contains("lambda3")) c.weights.lambda3 = j.at("lambda3").get<double>();
    if (j.contains("margin")) c.weights.margin = j.at("margin").get<double>();
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("ablation"))
        for (const auto& a : j.at("ablation")) c.ablation.insert(ablation_from_string(a));
    if (j.contains("kl_mode")) c.kl_mode = kl_mode_from_string(j.at("kl_mode"));
    if (j.contains("pool_method")) c.pool_method = pool_method_from_string(j.at("pool_method"));
    if (j.contains("stop_grad_anti")) c.stop_grad_anti = j.at("stop_grad_anti").get<bool>();
    if (j.contains("optimizer"))
        c.optimizer = j.at("optimizer").get<std::string>() == "adam" ? OptimizerKind::adam
                                                                     : OptimizerKind::sgd;
    if (j.contains("grad_clip")) c.grad_clip = j.at("grad_clip").get<double>();
    return c;
}

// ---- Run directory orchestration ----
// Layout: config.json, metrics.jsonl (one LossBreakdown per step),
// checkpoint-final, report.json. Wall-clock goes to run.log only, so the
// JSON artifacts are byte-stable across reruns.

struct RunResult {
    TrainReport report;
    std::filesystem::path dir;
};

inline json loss_breakdown_to_json(long step, const LossBreakdown& b) {
    return json{{"step", step}, {"ce", b.ce}, {"kl", b.kl}, {"triplet", b.triplet},
                {"total", b.total}};
}

inline RunResult run_training_to_dir(const std::filesystem::path& out_dir, Model& model,
                                     const Tokenizer& tokenizer,
                                     const std::vector<Triplet>& train_set,
                                     const std::vector<Triplet>& val_set,
                                     const TrainConfig& config,
                                     const json& run_config_echo = json()) {
    config.validate();
    std::filesystem::create_directories(out_dir);

    {
        std::ofstream cfg(out_dir / "config.json", std::ios::binary);
        if (!cfg) throw IoError("cannot write config.json in " + out_dir.string());
        json j = train_config_to_json(config);
        j["model"] = model_config_to_json(model.config());
        if (!run_config_echo.is_null()) j["run"] = run_config_echo;
        cfg << j.dump(2) << "\n";
    }

    std::ofstream metrics(out_dir / "metrics.jsonl", std::ios::binary);
    if (!metrics) throw IoError("cannot write metrics.jsonl in " + out_dir.string());
    TrainReport report =
        train<float>(model, train_set, val_set, config, [&](const StepRecord& r) {
            metrics << loss_breakdown_to_json(r.step, r.loss).dump() << "\n";
        });
    metrics.close();

    const std::filesystem::path ckpt = out_dir / "checkpoint-final";
    save_checkpoint(ckpt.string(), model, tokenizer,
                    static_cast<long>(report.steps.size()), train_config_to_json(config));
    report.checkpoint_path = ckpt.string();

    {
        std::ofstream rep(out_dir / "report.json", std::ios::binary);
        json j{{"steps", report.steps.size()},
               {"final_val_ce", report.final_val_ce},
               {"final_val_kl", report.final_val_kl},
               {"checkpoint", "checkpoint-final"}};
        if (!report.steps.empty()) {
            j["first_loss"] = loss_breakdown_to_json(report.steps.front().step,
                                                     report.steps.front().loss);
            j["last_loss"] =
                loss_breakdown_to_json(report.steps.back().step, report.steps.back().loss);
        }
        rep << j.dump(2) << "\n";
    }
    {
        std::ofstream log(out_dir / "run.log", std::ios::app);
        log << "wall_clock_seconds=" << report.wall_clock_seconds << "\n";
    }
    return RunResult{std::move(report), out_dir};
}

// ---- Hyperparameter grid (lambda triples x margins) ----

struct GridSpec {
    std::vector<std::array<double, 3>> lambda_triples;
    std::vector<double> margins;
};

enum class GridSortKey { none, val_ce, val_kl, val_ce_then_kl };

struct GridRow {
    TrainConfig config;
    TrainReport report;
};

struct GridResult {
    std::vector<GridRow> rows;
    bool complete = true;
};

// Each cell trains a freshly re-initialized model from the same
// ModelConfig, so rows differ only in the swept hyperparameters.
inline GridResult grid_search(const ModelConfig& model_config, const TrainConfig& base,
                              const std::vector<Triplet>& train_set,
                              const std::vector<Triplet>& val_set, const GridSpec& grid,
                              size_t budget = SIZE_MAX,
                              GridSortKey sort_key = GridSortKey::none) {
    if (grid.lambda_triples.empty() || grid.margins.empty())
        throw ConfigError("grid_search: empty grid");
    GridResult result;
    for (const auto& lambdas : grid.lambda_triples) {
        for (double margin : grid.margins) {
            if (result.rows.size() >= budget) {
                result.complete = false;
                break;
            }
            TrainConfig c = base;
            c.weights.lambda1 = lambdas[0];
            c.weights.lambda2 = lambdas[1];
            c.weights.lambda3 = lambdas[2];
            c.weights.margin = margin;
            Model model(model_config);
            GridRow row;
            row.config = c;
            row.report = train<float>(model, train_set, val_set, c);
            result.rows.push_back(std::move(row));
        }
        if (!result.complete) break;
    }
    if (sort_key != GridSortKey::none) {
        std::stable_sort(result.rows.begin(), result.rows.end(),
                         [sort_key](const GridRow& a, const GridRow& b) {
                             switch (sort_key) {
                                 case GridSortKey::val_ce:
                                     return a.report.final_val_ce < b.report.final_val_ce;
                                 case GridSortKey::val_kl:
                                     return a.report.final_val_kl < b.report.final_val_kl;
                                 default:  // desk-scale selection metric
                                     return std::pair(a.report.final_val_ce, a.report.final_val_kl) <
                                            std::pair(b.report.final_val_ce, b.report.final_val_kl);
                             }
                         });
    }
    return result;
}

}  // namespace klaad
