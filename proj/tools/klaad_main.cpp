// Command-line front end: build-triplets -> train -> analyze-attention ->
// eval, sharing one run-directory convention. Exit codes: 0 success,
// 2 input validation, 3 numeric abort, 4 missing resource.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "klaad/attention_analysis.hpp"
#include "klaad/checkpoint.hpp"
#include "klaad/corpus.hpp"
#include "klaad/evaluation.hpp"
#include "klaad/model.hpp"
#include "klaad/objective.hpp"
#include "klaad/stats.hpp"
#include "klaad/tokenizer.hpp"
#include "klaad/trainer.hpp"

namespace fs = std::filesystem;
using klaad::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitMissing = 4;

std::string resolve_out_dir(std::string out, const std::string& command) {
    if (!out.empty()) return out;
    const char* root = std::getenv("KLAAD_OUT_ROOT");
    if (root && *root) return std::string(root) + "/" + command;
    throw klaad::ConfigError("no --out given and KLAAD_OUT_ROOT is not set");
}

void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw klaad::IoError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw klaad::IoError("cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw klaad::ParseError("bad json in " + path.string() + ": " + e.what());
    }
    return j;
}

uint64_t fnv1a(const std::string& bytes) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// run.json links every artifact a command produced in its out dir.
void write_run_summary(const fs::path& dir, const std::string& command,
                       const std::vector<std::string>& artifacts) {
    json j{{"command", command}, {"artifacts", artifacts}};
    write_json_file(dir / "run.json", j);
}

void save_vocab(const fs::path& path, const klaad::Tokenizer& tok) {
    write_json_file(path, json{{"pad_id", klaad::Tokenizer::kPadId},
                               {"unk_id", klaad::Tokenizer::kUnkId},
                               {"bos_id", klaad::Tokenizer::kBosId},
                               {"words", tok.words()}});
}

klaad::Tokenizer load_vocab(const fs::path& path) {
    const json j = read_json_file(path);
    return klaad::Tokenizer(j.at("words").get<std::vector<std::string>>());
}

// ---- build-triplets ----

int cmd_build_triplets(const std::string& input, const std::string& format_name,
                       const std::string& out_name, uint64_t seed, double split_fraction,
                       int max_len, int vocab_size) {
    const fs::path out_dir = resolve_out_dir(out_name, "build-triplets");
    const klaad::RecordFormat format = format_name == "stereoset_json"
                                           ? klaad::RecordFormat::stereoset_json
                                           : klaad::RecordFormat::fixture_jsonl;

    const auto records = klaad::load_records(input, format);
    if (records.empty()) throw klaad::InputError("no records in " + input);

    std::vector<std::string> texts;
    for (const auto& r : records)
        for (const auto& t : klaad::surface_texts(r)) texts.push_back(t);
    const klaad::Tokenizer tokenizer = klaad::build_vocab(texts, vocab_size);

    size_t dropped = 0;
    const auto triplets = klaad::build_triplets(records, tokenizer, max_len, &dropped);
    if (triplets.empty()) throw klaad::InputError("all records dropped by the length cap");
    const auto [train_set, val_set] =
        klaad::split(triplets, klaad::SplitSpec{split_fraction, seed});

    fs::create_directories(out_dir);
    klaad::write_triplets_jsonl((out_dir / "train.jsonl").string(), train_set);
    klaad::write_triplets_jsonl((out_dir / "val.jsonl").string(), val_set);
    save_vocab(out_dir / "vocab.json", tokenizer);

    std::map<std::string, size_t> categories, subsets;
    for (const auto& t : triplets) {
        ++categories[klaad::to_string(t.category)];
        ++subsets[klaad::to_string(t.subset)];
    }
    std::string blob;
    for (const auto& t : train_set) blob += klaad::triplet_to_json(t).dump();
    for (const auto& t : val_set) blob += klaad::triplet_to_json(t).dump();
    char hash[24];
    std::snprintf(hash, sizeof(hash), "fnv1a:%016llx",
                  static_cast<unsigned long long>(fnv1a(blob)));

    write_json_file(out_dir / "manifest.json",
                    json{{"input", input},
                         {"format", format_name},
                         {"records", records.size()},
                         {"triplets", triplets.size()},
                         {"dropped_overlength", dropped},
                         {"train", train_set.size()},
                         {"val", val_set.size()},
                         {"train_fraction", split_fraction},
                         {"seed", seed},
                         {"max_len", max_len},
                         {"vocab_size", tokenizer.size()},
                         {"categories", categories},
                         {"subsets", subsets},
                         {"content_hash", hash}});
    write_run_summary(out_dir, "build-triplets",
                      {"train.jsonl", "val.jsonl", "vocab.json", "manifest.json"});
    std::cout << "wrote " << train_set.size() << " train / " << val_set.size()
              << " val triplets to " << out_dir.string() << "\n";
    return kExitOk;
}

// ---- train ----

int cmd_train(const std::string& config_path, const std::vector<std::string>& ablate,
              const std::string& out_override) {
    const json cfg = read_json_file(config_path);
    for (const char* key : {"data", "model", "train"})
        if (!cfg.contains(key))
            throw klaad::ValidationError(std::string("run config missing '") + key + "'");

    const fs::path train_path = cfg.at("data").at("train").get<std::string>();
    const fs::path val_path = cfg.at("data").value("val", std::string());
    const fs::path vocab_path = cfg.at("data").at("vocab").get<std::string>();

    const klaad::Tokenizer tokenizer = load_vocab(vocab_path);
    const auto train_set = klaad::load_triplets_jsonl(train_path.string());
    std::vector<klaad::Triplet> val_set;
    if (!val_path.empty()) val_set = klaad::load_triplets_jsonl(val_path.string());

    klaad::ModelConfig mc = klaad::model_config_from_json(cfg.at("model"));
    if (!cfg.at("model").contains("vocab_size") || mc.vocab_size <= 0)
        mc.vocab_size = tokenizer.size();
    if (mc.vocab_size < tokenizer.size())
        throw klaad::ValidationError("model vocab_size smaller than the vocabulary file");

    klaad::TrainConfig tc = klaad::train_config_from_json(cfg.at("train"));
    for (const auto& a : ablate) tc.ablation.insert(klaad::ablation_from_string(a));

    std::string out_name = out_override;
    if (out_name.empty()) out_name = cfg.value("out_dir", std::string());
    const fs::path out_dir = resolve_out_dir(out_name, "train");

    klaad::Model model(mc);
    const klaad::RunResult result =
        klaad::run_training_to_dir(out_dir, model, tokenizer, train_set, val_set, tc, cfg);
    write_run_summary(out_dir, "train",
                      {"config.json", "metrics.jsonl", "checkpoint-final", "report.json"});
    std::cout << "trained " << result.report.steps.size() << " steps; run dir "
              << out_dir.string() << "\n";
    return kExitOk;
}

// ---- analyze-attention ----

int cmd_analyze_attention(const std::string& checkpoint_path, const std::string& pairs_path,
                          const std::string& out_name, const std::string& format,
                          size_t heatmap_limit) {
    const fs::path out_dir = resolve_out_dir(out_name, "analyze-attention");
    klaad::LoadedCheckpoint ckpt = klaad::load_checkpoint(checkpoint_path);
    const auto pairs = klaad::load_triplets_jsonl(pairs_path);
    if (pairs.empty()) throw klaad::InputError("pairs file is empty: " + pairs_path);

    std::vector<klaad::DiffMatrix> diffs;
    for (const auto& t : pairs) {
        t.stereo.validate(ckpt.model->vocab_size());
        t.anti.validate(ckpt.model->vocab_size());
        if (!(t.bias_span_stereo.begin >= 0 && t.bias_span_stereo.end <= t.stereo.length &&
              t.bias_span_anti.begin >= 0 && t.bias_span_anti.end <= t.anti.length))
            throw klaad::ValidationError("bias span out of sequence bounds in " + pairs_path);
        diffs.push_back(klaad::diff_matrix(*ckpt.model, t.stereo, t.anti, t.bias_span_stereo,
                                           t.bias_span_anti));
    }
    const klaad::AttentionDiffStats stats = klaad::dataset_stats(diffs);

    fs::create_directories(out_dir);
    write_json_file(out_dir / "stats.json", klaad::stats_to_json(stats));
    std::vector<std::string> artifacts = {"stats.json"};

    if (format != "none") {
        for (size_t i = 0; i < diffs.size() && i < heatmap_limit; ++i) {
            const auto& t = pairs[i];
            const int n = diffs[i].values.rows;
            std::vector<std::string> labels(static_cast<size_t>(n));
            for (int p = 0; p < n; ++p) {
                const std::string s = p < t.stereo.length
                                          ? ckpt.tokenizer.word_of(t.stereo.ids[static_cast<size_t>(p)])
                                          : "";
                const std::string a = p < t.anti.length
                                          ? ckpt.tokenizer.word_of(t.anti.ids[static_cast<size_t>(p)])
                                          : "";
                labels[static_cast<size_t>(p)] = s == a ? s : (s.empty() ? a : (a.empty() ? s : s + "/" + a));
            }
            const std::string base = "pair-" + std::to_string(i);
            if (format == "csv" || format == "both") {
                klaad::export_heatmap(diffs[i], labels, (out_dir / (base + ".csv")).string(),
                                      klaad::HeatmapFormat::csv);
                artifacts.push_back(base + ".csv");
            }
            if (format == "image" || format == "both") {
                klaad::export_heatmap(diffs[i], labels, (out_dir / (base + ".svg")).string(),
                                      klaad::HeatmapFormat::image);
                artifacts.push_back(base + ".svg");
            }
        }
    }
    write_run_summary(out_dir, "analyze-attention", artifacts);
    std::cout << "analyzed " << stats.included_pairs << " pairs; stats in "
              << (out_dir / "stats.json").string() << "\n";
    return kExitOk;
}

// ---- eval ----

int cmd_eval(const std::string& suite, const std::string& checkpoint_path,
             const std::string& data_path, const std::string& lexicon_dir,
             const std::string& baseline_path, const std::string& out_name, int max_new,
             bool length_normalize, bool emit_csv) {
    const fs::path out_dir = resolve_out_dir(out_name, "eval-" + suite);
    klaad::LoadedCheckpoint ckpt = klaad::load_checkpoint(checkpoint_path);
    const klaad::TokenizedTextModel text_model(*ckpt.model, ckpt.tokenizer);

    fs::create_directories(out_dir);
    std::vector<std::string> artifacts = {"report.json"};
    json report;
    std::string csv;

    if (suite == "bbq") {
        const auto examples = klaad::load_bbq_jsonl(data_path);
        if (examples.empty()) throw klaad::InputError("no bbq examples in " + data_path);
        const klaad::BBQReport r = klaad::score_bbq(text_model, examples, length_normalize);
        report = klaad::bbq_report_to_json(r);
        csv = klaad::bbq_report_to_csv(r);
    } else if (suite == "crows") {
        const auto pairs = klaad::load_crows_jsonl(data_path);
        if (pairs.empty()) throw klaad::InputError("no crows pairs in " + data_path);
        std::vector<double> baseline;
        if (!baseline_path.empty()) {
            const json base = read_json_file(baseline_path);
            if (!base.contains("abs_gaps"))
                throw klaad::ValidationError("baseline report lacks abs_gaps: " + baseline_path);
            baseline = base.at("abs_gaps").get<std::vector<double>>();
        }
        const klaad::CrowsReport r =
            klaad::score_crows(text_model, pairs, baseline.empty() ? nullptr : &baseline);
        report = klaad::crows_report_to_json(r);
        csv = klaad::crows_report_to_csv(r);
    } else if (suite == "bold") {
        const auto prompts = klaad::load_bold_jsonl(data_path);
        if (prompts.empty()) throw klaad::InputError("no bold prompts in " + data_path);
        if (lexicon_dir.empty())
            throw klaad::IoError("bold evaluation requires --lexicons");
        std::vector<klaad::AffectLexicon> lexicons;
        for (int d = 0; d < klaad::kNumAffectDimensions; ++d) {
            const auto dim = static_cast<klaad::AffectDimension>(d);
            const fs::path p = fs::path(lexicon_dir) / (std::string(klaad::to_string(dim)) + ".tsv");
            if (!fs::exists(p))
                throw klaad::IoError("missing lexicon dimension file: " + p.string());
            lexicons.push_back(klaad::load_affect_lexicon(p.string()));
        }
        klaad::BoldGenSettings gen;
        gen.max_new = max_new;
        const klaad::AffectReport r = klaad::score_bold(text_model, prompts, lexicons, gen);
        report = klaad::affect_report_to_json(r);
        csv = klaad::affect_report_to_csv(r);
    } else {
        throw klaad::ConfigError("unknown suite: " + suite);
    }

    write_json_file(out_dir / "report.json", report);
    if (emit_csv) {
        std::ofstream(out_dir / "report.csv", std::ios::binary) << csv;
        artifacts.push_back("report.csv");
    }
    write_run_summary(out_dir, "eval-" + suite, artifacts);
    std::cout << suite << " report written to " << (out_dir / "report.json").string() << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KLAAD debiasing toolkit: triplet construction, composite-loss training, "
                 "attention analysis, and bias benchmarks"};
    app.require_subcommand(1);

    // build-triplets
    std::string bt_input, bt_format = "fixture_jsonl", bt_out;
    uint64_t bt_seed = 0;
    double bt_split = 0.95;
    int bt_max_len = 64, bt_vocab = 4096;
    auto* bt = app.add_subcommand("build-triplets",
                                  "Construct stereo/anti/unrelated triplets with a split");
    bt->add_option("--input", bt_input, "records file")->required();
    bt->add_option("--format", bt_format, "stereoset_json or fixture_jsonl")
        ->check(CLI::IsMember({"stereoset_json", "fixture_jsonl"}));
    bt->add_option("--out", bt_out, "output directory");
    bt->add_option("--seed", bt_seed, "shuffle seed");
    bt->add_option("--split", bt_split, "train fraction in (0,1)");
    bt->add_option("--max-len", bt_max_len, "drop triplets longer than this");
    bt->add_option("--vocab-size", bt_vocab, "vocabulary cap including reserved ids");

    // train
    std::string tr_config, tr_out;
    std::vector<std::string> tr_ablate;
    auto* tr = app.add_subcommand("train", "Run KLAAD fine-tuning from a run config");
    tr->add_option("--config", tr_config, "run config json")->required();
    tr->add_option("--ablate", tr_ablate, "drop a loss term: ce, kl, or triplet");
    tr->add_option("--out", tr_out, "override the config's out_dir");

    // analyze-attention
    std::string an_ckpt, an_pairs, an_out, an_format = "csv";
    size_t an_limit = 16;
    auto* an = app.add_subcommand("analyze-attention",
                                  "Stereo-vs-anti attention difference statistics");
    an->add_option("--checkpoint", an_ckpt, "model checkpoint")->required();
    an->add_option("--pairs", an_pairs, "triplet jsonl with bias spans")->required();
    an->add_option("--out", an_out, "output directory");
    an->add_option("--format", an_format, "heatmaps: csv, image, both, or none")
        ->check(CLI::IsMember({"csv", "image", "both", "none"}));
    an->add_option("--limit", an_limit, "max heatmaps to write");

    // eval
    std::string ev_suite, ev_ckpt, ev_data, ev_lex, ev_baseline, ev_out;
    int ev_max_new = 32;
    bool ev_no_norm = false, ev_csv = true;
    auto* ev = app.add_subcommand("eval", "Score a benchmark suite");
    ev->add_option("--suite", ev_suite, "bbq, crows, or bold")
        ->required()
        ->check(CLI::IsMember({"bbq", "crows", "bold"}));
    ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
    ev->add_option("--data", ev_data, "suite jsonl input")->required();
    ev->add_option("--lexicons", ev_lex, "lexicon directory (bold)");
    ev->add_option("--baseline", ev_baseline, "baseline crows report.json");
    ev->add_option("--out", ev_out, "output directory");
    ev->add_option("--max-new", ev_max_new, "generated tokens per bold prompt");
    ev->add_flag("--no-normalize", ev_no_norm, "disable length-normalized bbq scoring");
    ev->add_flag("!--no-csv", ev_csv, "skip the csv table");

    CLI11_PARSE(app, argc, argv);

    try {
        if (bt->parsed())
            return cmd_build_triplets(bt_input, bt_format, bt_out, bt_seed, bt_split, bt_max_len,
                                      bt_vocab);
        if (tr->parsed()) return cmd_train(tr_config, tr_ablate, tr_out);
        if (an->parsed())
            return cmd_analyze_attention(an_ckpt, an_pairs, an_out, an_format, an_limit);
        if (ev->parsed())
            return cmd_eval(ev_suite, ev_ckpt, ev_data, ev_lex, ev_baseline, ev_out, ev_max_new,
                            !ev_no_norm, ev_csv);
    } catch (const klaad::TrainAbortError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const klaad::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const klaad::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissing;
    } catch (const klaad::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return kExitOk;
}
