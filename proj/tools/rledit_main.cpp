// rledit: command-line driver for the editing pipeline.
//
// Exit codes: 0 success, 1 other failure, 2 missing input file,
// 3 configuration error, 4 training failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "rledit/errors.hpp"
#include "rledit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace rledit;

namespace {

struct CommonFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string preset = "desk";
    std::string out;
    std::optional<int> stream_len;
    std::optional<int> batch_size;
    std::string ablation;
    std::string data_dir;
    std::string model_path;
    std::string hypernet_path;
    std::string edited_path;
    std::vector<std::string> overrides;
};

RunConfig resolve_config(const CommonFlags& f, bool edit_stream_flag) {
    RunConfig cfg = make_preset(f.preset);
    if (!f.config_path.empty()) {
        for (const auto& [k, v] : read_config_file(f.config_path)) apply_setting(cfg, k, v);
    }
    for (const auto& o : f.overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError(o, "--set expects key=value");
        apply_setting(cfg, o.substr(0, eq), o.substr(eq + 1));
    }
    if (!f.seed) throw ConfigError("seed", "--seed is required");
    cfg.seed = *f.seed;
    if (f.batch_size) cfg.trainer.hyper.batch_size = *f.batch_size;
    if (f.stream_len) {
        if (edit_stream_flag) cfg.edit_stream_len = *f.stream_len;
        else cfg.trainer.hyper.stream_len = *f.stream_len;
    }
    if (!f.ablation.empty()) cfg.trainer.ablation = parse_ablation(f.ablation);
    cfg.validate();
    return cfg;
}

fs::path require(const std::string& value, const char* flag) {
    if (value.empty()) throw ConfigError(flag, std::string("--") + flag + " is required");
    const fs::path p(value);
    if (!fs::exists(p)) throw MissingFileError(p.string());
    return p;
}

fs::path out_dir(const CommonFlags& f) {
    if (f.out.empty()) throw ConfigError("out", "--out is required");
    fs::create_directories(f.out);
    return f.out;
}

void cmd_gen_data(const CommonFlags& f) {
    const RunConfig cfg = resolve_config(f, false);
    const fs::path out = out_dir(f);
    const Corpus corpus = generate_dataset(cfg);
    save_dataset(corpus, out);
    CorpusConfig data = cfg.data;
    data.seed = cfg.data_seed();
    std::ofstream(out / "dataset_manifest.txt", std::ios::binary) << corpus_manifest(data, corpus);
    write_manifest(out, "gen-data", cfg, {});
    for (const auto& p : dataset_files(out)) std::cout << p.string() << '\n';
}

void cmd_pretrain(const CommonFlags& f) {
    const RunConfig cfg = resolve_config(f, false);
    const fs::path data = require(f.data_dir, "data");
    const fs::path out = out_dir(f);
    const Corpus corpus = load_dataset(data);
    const ModelWeights w0 = pretrain_model(cfg, corpus);
    w0.save(out / "model.rle");
    std::size_t ok = 0;
    const auto lm = corpus.lm_corpus();
    for (const auto& s : lm) ok += exact_match(w0, s);
    std::cerr << "pretrained: exact match " << ok << "/" << lm.size() << " on training facts\n";
    write_manifest(out, "pretrain", cfg, dataset_files(data));
    std::cout << (out / "model.rle").string() << '\n';
}

void cmd_train(const CommonFlags& f) {
    const RunConfig cfg = resolve_config(f, false);
    const fs::path data = require(f.data_dir, "data");
    const fs::path model = require(f.model_path, "model");
    const fs::path out = out_dir(f);
    const Corpus corpus = load_dataset(data);
    const ModelWeights w0 = ModelWeights::load(model);
    RunConfig run = cfg;
    if (run.trainer.checkpoint_every > 0) run.trainer.checkpoint_dir = out / "checkpoints";
    const TrainResult r = train_hypernetwork(run, corpus, w0);
    r.hypernet.save(out / "hypernet.rlh");
    write_training_log(out / "training_log.csv", r.log);
    std::cerr << "trained " << r.log.size() << " epochs" << (r.early_stopped ? " (early stop)" : "") << ", final J "
              << r.log.back().J << '\n';
    auto inputs = dataset_files(data);
    inputs.push_back(model);
    write_manifest(out, "train", cfg, inputs);
    std::cout << (out / "hypernet.rlh").string() << '\n';
}

void cmd_edit(const CommonFlags& f) {
    const RunConfig cfg = resolve_config(f, true);
    const fs::path data = require(f.data_dir, "data");
    const fs::path model = require(f.model_path, "model");
    const fs::path hyper = require(f.hypernet_path, "hypernet");
    const fs::path out = out_dir(f);
    const Corpus corpus = load_dataset(data);
    const ModelWeights w0 = ModelWeights::load(model);
    const HyperNetwork h = HyperNetwork::load(hyper);
    const auto stream = eval_stream(cfg, corpus);
    const EditSessionState s = edit_stream(w0, h, stream);
    s.weights.save(out / "edited.rle");
    save_records(flatten(stream), out / "edited_records.jsonl");
    std::ofstream log(out / "session_log.csv", std::ios::binary);
    log << "step,seconds,update_norm_sq\n";
    for (std::size_t i = 0; i < s.step_seconds.size(); ++i) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%zu,%.6g,%.10g\n", i + 1, s.step_seconds[i], s.step_update_norm_sq[i]);
        log << buf;
    }
    auto inputs = dataset_files(data);
    inputs.push_back(model);
    inputs.push_back(hyper);
    write_manifest(out, "edit", cfg, inputs);
    std::cout << (out / "edited.rle").string() << '\n';
}

void cmd_eval(const CommonFlags& f) {
    const RunConfig cfg = resolve_config(f, true);
    const fs::path data = require(f.data_dir, "data");
    const fs::path model = require(f.model_path, "model");
    const fs::path out = out_dir(f);
    const Corpus corpus = load_dataset(data);
    const ModelWeights w0 = ModelWeights::load(model);
    std::vector<fs::path> inputs = dataset_files(data);
    inputs.push_back(model);
    ModelWeights final_weights = w0;
    std::vector<KnowledgeRecord> edited;
    if (f.edited_path.empty()) {
        // No edits: score W_0 against the held-out stream it was never taught.
        edited = flatten(eval_stream(cfg, corpus));
    } else {
        const fs::path e = require(f.edited_path, "edited");
        final_weights = ModelWeights::load(e);
        const fs::path records = e.parent_path() / "edited_records.jsonl";
        if (!fs::exists(records)) throw MissingFileError(records.string());
        edited = load_records(records);
        inputs.push_back(e);
        inputs.push_back(records);
    }
    const MetricsReport m = evaluate(final_weights, w0, edited, corpus.locality);
    m.write_csv(out / "metrics.csv");
    m.write_records_jsonl(out / "records.jsonl");
    write_manifest(out, "eval", cfg, inputs);
    std::cerr << m.table();
    std::ifstream csv(out / "metrics.csv");
    std::cout << csv.rdbuf();
}

void cmd_ablate(const CommonFlags& f) {
    const RunConfig cfg = resolve_config(f, true);
    const fs::path data = require(f.data_dir, "data");
    const fs::path model = require(f.model_path, "model");
    const fs::path out = out_dir(f);
    const Corpus corpus = load_dataset(data);
    const ModelWeights w0 = ModelWeights::load(model);
    std::vector<VariantOutcome> rows;
    for (Ablation a : kAllAblations) {
        std::cerr << "variant " << ablation_name(a) << "...\n";
        rows.push_back(run_variant(cfg, corpus, w0, a));
    }
    write_ablation_csv(out / "ablation.csv", rows);
    std::ofstream norms(out / "ablation_update_norms.csv", std::ios::binary);
    norms << "variant,mean_update_norm_sq\n";
    for (const auto& r : rows) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%s,%.10g\n", ablation_name(r.ablation).c_str(), r.mean_update_norm_sq);
        norms << buf;
    }
    auto inputs = dataset_files(data);
    inputs.push_back(model);
    write_manifest(out, "ablate", cfg, inputs);
    std::ifstream csv(out / "ablation.csv");
    std::cout << csv.rdbuf();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Lifelong model editing with a trained hypernetwork on a toy language model"};
    app.require_subcommand(1);
    CommonFlags flags;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", flags.config_path, "key = value configuration file");
        sub->add_option("--seed", flags.seed, "master seed (required)");
        sub->add_option("--preset", flags.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
        sub->add_option("--out", flags.out, "output directory");
        sub->add_option("--set", flags.overrides, "override a config key, key=value (repeatable)");
    };
    auto add_data = [&](CLI::App* sub) { sub->add_option("--data", flags.data_dir, "dataset directory"); };
    auto add_model = [&](CLI::App* sub) { sub->add_option("--model", flags.model_path, "pretrained model checkpoint"); };

    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic fact corpus");
    add_common(gen);
    CLI::App* pre = app.add_subcommand("pretrain", "pretrain the language model on the fact corpus");
    add_common(pre);
    add_data(pre);
    CLI::App* trn = app.add_subcommand("train", "train the editor hypernetwork");
    add_common(trn);
    add_data(trn);
    add_model(trn);
    trn->add_option("--stream-len", flags.stream_len, "training trajectory length in batches");
    trn->add_option("--batch-size", flags.batch_size, "records per edit batch");
    trn->add_option("--ablation", flags.ablation, "none, no_rl, no_backtracking or no_regularization");
    CLI::App* edt = app.add_subcommand("edit", "apply the trained hypernetwork to the held-out stream");
    add_common(edt);
    add_data(edt);
    add_model(edt);
    edt->add_option("--hypernet", flags.hypernet_path, "hypernetwork checkpoint");
    edt->add_option("--stream-len", flags.stream_len, "number of batches to edit");
    edt->add_option("--batch-size", flags.batch_size, "records per edit batch");
    CLI::App* evl = app.add_subcommand("eval", "score edited weights");
    add_common(evl);
    add_data(evl);
    add_model(evl);
    evl->add_option("--edited", flags.edited_path, "edited checkpoint written by edit (omit to score W_0)");
    evl->add_option("--stream-len", flags.stream_len, "batches scored when --edited is omitted");
    evl->add_option("--batch-size", flags.batch_size, "records per batch");
    CLI::App* abl = app.add_subcommand("ablate", "train, edit and score every ablation variant");
    add_common(abl);
    add_data(abl);
    add_model(abl);
    abl->add_option("--stream-len", flags.stream_len, "number of held-out batches to edit");
    abl->add_option("--batch-size", flags.batch_size, "records per edit batch");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 3;
    }

    try {
        if (gen->parsed()) cmd_gen_data(flags);
        else if (pre->parsed()) cmd_pretrain(flags);
        else if (trn->parsed()) cmd_train(flags);
        else if (edt->parsed()) cmd_edit(flags);
        else if (evl->parsed()) cmd_eval(flags);
        else if (abl->parsed()) cmd_ablate(flags);
    } catch (const MissingFileError& e) {
        std::cerr << "error: missing file " << e.path() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: config " << e.what() << '\n';
        return 3;
    } catch (const TrainingFailure& e) {
        std::cerr << "error: training failure at step " << e.step() << ": " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
