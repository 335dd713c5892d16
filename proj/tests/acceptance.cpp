// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Usage: acceptance [--quick]   (--quick skips the desk-scale criteria 5 to 7)

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "rledit/config.hpp"
#include "rledit/pipeline.hpp"
#include "support.hpp"
#include "trajectory_support.hpp"

using namespace rledit;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const std::string& name, bool ok, double seconds, const std::string& detail) {
    std::printf("[%s] C%d %-28s %8.2fs  %s\n", ok ? "PASS" : "FAIL", id, name.c_str(), seconds, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

void gradient_check() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::set<std::string> seen;
    for (std::uint64_t s = 0; s < 20; ++s) {
        auto c = testing::make_composition(1000 + s, s);
        seen.insert(c.ops.begin(), c.ops.end());
        const auto analytic = testing::analytic_gradient(c.build(), c.leaves);
        const auto numeric = testing::numeric_gradient([&] { return c.build().item(); }, c.leaves, 1e-5);
        worst = std::max(worst, testing::relative_error(analytic, numeric));
    }
    bool covered = true;
    for (const auto& n : testing::primitive_names()) covered &= seen.count(n) == 1;
    const double secs = since(t0);
    report(1, "gradient check", worst < 1e-4 && covered && secs < 10.0, secs,
           "max rel err " + fmt("%.3g", worst) + (covered ? ", all primitives" : ", MISSING primitives") + " (< 1e-4, < 10s)");
}

void rank_one_factorization(const RunConfig& cfg, const Corpus& corpus) {
    const auto t0 = Clock::now();
    ModelConfig mc = cfg.model;
    mc.editable_layers.clear();
    for (int b = 0; b < mc.n_layers; ++b)
        for (const char* k : {"attn_q", "attn_k", "attn_v", "attn_o", "ffn_up", "ffn_down"}) mc.editable_layers.push_back({k, b});
    const ModelWeights w = ModelWeights::initialize(mc, 17);
    double worst = 0.0, largest = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
        const TokenSequence seq = corpus.eval[i].edit();
        const auto factors = collect_rank_one_factors(w, seq);
        const ModelWeights wg = w.detached(true);
        ad::backward(answer_nll(wg, seq));
        for (const auto& layer : mc.editable_layers) {
            const auto& f = factors.at(layer);
            const auto g = wg.at(layer).grad();
            const std::size_t out = f.delta.cols(), in = f.u.cols();
            for (std::size_t a = 0; a < out; ++a)
                for (std::size_t b = 0; b < in; ++b) {
                    double s = 0.0;
                    for (std::size_t p = 0; p < f.u.rows(); ++p) s += f.delta.at(p, a) * f.u.at(p, b);
                    worst = std::max(worst, std::abs(s - g[a * in + b]));
                    largest = std::max(largest, std::abs(g[a * in + b]));
                }
        }
    }
    const double secs = since(t0);
    report(2, "rank-1 factorization", worst < 1e-8 && largest > 0.0 && secs < 30.0, secs,
           "max abs diff " + fmt("%.3g", worst) + " at max |grad| " + fmt("%.3g", largest) +
               " over 12 layers x 10 records (< 1e-8, < 30s)");
}

void reward_identities(const RunConfig& cfg, const Corpus& corpus) {
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (double mu : {0.95, 0.5, 1.0})
        for (std::size_t n : {1u, 4u, 10u}) {
            const auto w = backtracking_weights(n, mu);
            for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(w[i] - std::pow(mu, double(n - i))));
        }
    const ModelWeights w0 = ModelWeights::initialize(cfg.model, 11);
    auto h = HyperNetwork::init(cfg.model, 8, 3);
    calibrate_hypernetwork(h, w0, corpus.train, 4);
    testing::randomize_parameters(h, 7, 0.05);
    TrainerConfig tc = cfg.trainer;
    tc.hyper.k = 3;
    tc.hyper.eta = 0.37;
    tc.hyper.gamma = 1.0;
    const auto stream = make_stream(std::span(corpus.train.data(), 20), 4);
    LocalityReference ref(w0);
    const auto rr = rollout(ref, h, stream, tc);
    double sum = 0.0;
    for (const auto& s : rr.steps) {
        const auto& b = s.breakdown;
        sum += b.r;
        worst = std::max(worst, std::abs(b.r + (b.l_base + b.l_back + tc.hyper.eta * b.reg)));
    }
    worst = std::max(worst, std::abs(rr.steps.front().breakdown.l_back));
    worst = std::max(worst, std::abs(rr.J.item() - sum));
    const double secs = since(t0);
    report(3, "reward identities", worst < 1e-12 && secs < 5.0, secs, "max deviation " + fmt("%.3g", worst) + " (< 1e-12, < 5s)");
}

void micro_trajectory_gradient() {
    const auto t0 = Clock::now();
    const ModelConfig mc = testing::micro_model_config();
    const ModelWeights w0 = ModelWeights::initialize(mc, 21);
    auto h = HyperNetwork::init(mc, 3, 5);
    const auto stream = testing::micro_stream(2, 2);
    calibrate_hypernetwork(h, w0, flatten(stream), 2);
    testing::randomize_parameters(h, 9, 0.3);
    TrainerConfig tc;
    tc.hyper.k = 1;
    tc.hyper.stream_len = 2;
    tc.hyper.batch_size = 2;
    tc.hyper.eta = 1e-2;
    LocalityReference ref(w0);
    const auto rr = rollout(ref, h, stream, tc);
    const auto factors = testing::trajectory_factors(w0, h, stream);
    auto params = h.parameters();
    const auto analytic = testing::analytic_gradient(rr.J, params);
    const auto numeric = testing::numeric_gradient(
        [&] { return testing::frozen_factor_return(ref, h, stream, factors, tc); }, params);
    const double err = testing::relative_error(analytic, numeric);
    const double secs = since(t0);
    report(4, "micro trajectory gradient", err < 1e-3 && secs < 120.0, secs,
           "rel err " + fmt("%.3g", err) + " (< 1e-3, < 2min)");
}

struct DeskRun {
    Corpus corpus;
    ModelWeights w0;
    TrainResult trained;
    VariantOutcome full;
};

DeskRun desk_end_to_end(const RunConfig& cfg) {
    const auto t0 = Clock::now();
    DeskRun d;
    d.corpus = generate_dataset(cfg);
    d.w0 = pretrain_model(cfg, d.corpus);
    const double t_pre = since(t0);
    d.trained = train_hypernetwork(cfg, d.corpus, d.w0);
    const double t_train = since(t0) - t_pre;
    const auto stream = eval_stream(cfg, d.corpus);
    const auto records = flatten(stream);
    const auto session = edit_stream(d.w0, d.trained.hypernet, stream);
    d.full.metrics = evaluate(session.weights, d.w0, records, d.corpus.locality);
    d.full.mean_update_norm_sq = session.mean_update_norm_sq();
    d.full.epochs_run = static_cast<int>(d.trained.log.size());
    const double secs = since(t0);
    const auto zero = initial_hypernetwork(cfg, d.corpus, d.w0);
    const auto z = evaluate(edit_stream(d.w0, zero, stream).weights, d.w0, records, d.corpus.locality);
    const auto& m = d.full.metrics;
    const bool ok = m.efficacy >= 0.90 && m.generalization >= 0.75 && m.specificity >= 0.80 && z.efficacy <= 0.05 &&
                    secs < 900.0;
    char buf[320];
    std::snprintf(buf, sizeof buf,
                  "eff %.4f (>= 0.90) gen %.4f (>= 0.75) spec %.4f (>= 0.80) zero-policy eff %.4f (<= 0.05); "
                  "pretrain %.0fs train %.0fs over %d epochs (< 15min)",
                  m.efficacy, m.generalization, m.specificity, z.efficacy, t_pre, t_train, d.full.epochs_run);
    report(5, "desk end-to-end", ok, secs, buf);
    return d;
}

void ablations(const RunConfig& cfg, const DeskRun& d) {
    const auto t0 = Clock::now();
    const auto no_rl = run_variant(cfg, d.corpus, d.w0, Ablation::no_rl);
    const auto no_back = run_variant(cfg, d.corpus, d.w0, Ablation::no_backtracking);
    const auto no_reg = run_variant(cfg, d.corpus, d.w0, Ablation::no_regularization);
    const auto& f = d.full.metrics;
    const bool rl_ok = f.efficacy - no_rl.metrics.efficacy >= 0.2;
    const bool back_ok = no_back.metrics.efficacy < f.efficacy || no_back.metrics.generalization < f.generalization;
    const bool reg_ok = no_reg.mean_update_norm_sq > d.full.mean_update_norm_sq;
    char buf[400];
    std::snprintf(buf, sizeof buf,
                  "no_rl eff %.4f vs %.4f (drop >= 0.2: %s); no_backtracking eff %.4f gen %.4f vs %.4f/%.4f (%s); "
                  "no_regularization |upd|^2 %.4g vs %.4g (%s)",
                  no_rl.metrics.efficacy, f.efficacy, rl_ok ? "yes" : "no", no_back.metrics.efficacy,
                  no_back.metrics.generalization, f.efficacy, f.generalization, back_ok ? "yes" : "no",
                  no_reg.mean_update_norm_sq, d.full.mean_update_norm_sq, reg_ok ? "yes" : "no");
    report(6, "ablations", rl_ok && back_ok && reg_ok, since(t0), buf);
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void constant_edit_cost(const RunConfig& cfg, const DeskRun& d) {
    const auto t0 = Clock::now();
    std::vector<KnowledgeRecord> pool;
    const auto bs = static_cast<std::size_t>(cfg.trainer.hyper.batch_size);
    while (pool.size() < 200 * bs) pool.push_back(d.corpus.eval[pool.size() % d.corpus.eval.size()]);
    const auto stream = make_stream(pool, static_cast<int>(bs));
    const HyperNetwork before = d.trained.hypernet.clone();
    const auto session = edit_stream(d.w0, d.trained.hypernet, stream);
    const std::vector<double>& s = session.step_seconds;
    const double first = median({s.begin(), s.begin() + 20});
    const double last = median({s.end() - 20, s.end()});
    const bool same = d.trained.hypernet.bitwise_equal(before);
    const bool ok = same && session.steps_applied == 200 && last <= 2.0 * first;
    char buf[200];
    std::snprintf(buf, sizeof buf, "median step %.3gms first 20, %.3gms last 20 (ratio %.2f <= 2); theta %s", 1e3 * first,
                  1e3 * last, last / first, same ? "bitwise unchanged" : "CHANGED");
    report(7, "constant edit cost", ok, since(t0), buf);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(RLEDIT_CLI_PATH) + " " + args + " >>" + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// The whole command-line pipeline into `dir`; false on any nonzero exit.
bool pipeline(const fs::path& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    const fs::path log = dir / "log.txt";
    const std::string s = " --seed 13";
    const std::string budget = s + " --set pretrain.steps=60 --set trainer.epochs=4 --set trainer.checkpoint_every=2";
    auto p = [&](const char* name) { return (dir / name).string(); };
    return run_cli("gen-data" + s + " --out " + p("data"), log) == 0 &&
           run_cli("pretrain --data " + p("data") + " --out " + p("model") + budget, log) == 0 &&
           run_cli("train --data " + p("data") + " --model " + p("model/model.rle") + " --out " + p("hyper") + budget, log) ==
               0 &&
           run_cli("edit --data " + p("data") + " --model " + p("model/model.rle") + " --hypernet " + p("hyper/hypernet.rlh") +
                       " --out " + p("edited") + budget,
                   log) == 0 &&
           run_cli("eval --data " + p("data") + " --model " + p("model/model.rle") + " --edited " + p("edited/edited.rle") +
                       " --out " + p("eval") + budget,
                   log) == 0;
}

void determinism() {
    const auto t0 = Clock::now();
    const fs::path root = fs::temp_directory_path() / "rledit_acceptance";
    const bool ran = pipeline(root / "a") && pipeline(root / "b");
    std::size_t compared = 0;
    std::vector<std::string> differing;
    bool has_csv = false, has_ckpt = false;
    if (ran) {
        for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
            if (!e.is_regular_file()) continue;
            const auto name = e.path().filename().string();
            // Manifests name their own directory; the session log holds wall-clock timings.
            if (name == "manifest.txt" || name == "session_log.csv" || name == "log.txt") continue;
            const auto rel = fs::relative(e.path(), root / "a");
            ++compared;
            has_csv |= name == "metrics.csv";
            has_ckpt |= e.path().extension() == ".rlh" || e.path().extension() == ".rle";
            if (slurp(e.path()) != slurp(root / "b" / rel)) differing.push_back(rel.string());
        }
    }
    const bool ok = ran && differing.empty() && has_csv && has_ckpt;
    std::string detail = ran ? std::to_string(compared) + " files compared, " + std::to_string(differing.size()) + " differ"
                             : "pipeline run failed, see " + (root / "a" / "log.txt").string();
    for (const auto& d : differing) detail += " " + d;
    report(8, "determinism", ok, since(t0), detail);
}

void state_hygiene(const RunConfig& cfg, const Corpus& corpus, const ModelWeights& w0, const HyperNetwork& h) {
    const auto t0 = Clock::now();
    const int n = cfg.trainer.hyper.stream_len;
    const int bs = cfg.trainer.hyper.batch_size;
    const auto stream = make_stream(std::span(corpus.train.data(), static_cast<std::size_t>(n * bs)), bs);
    std::size_t violations = 0, reads = 0;
    for (int k : {cfg.trainer.hyper.k, 1, 3}) {
        TrainerConfig tc = cfg.trainer;
        tc.hyper.k = k;
        LocalityReference ref(w0);
        RolloutProbe probe;
        (void)rollout(ref, h, stream, tc, nullptr, &probe);
        violations += testing::hygiene_violations(probe, stream, k).size();
        reads += probe.reads().size();
    }
    // The checker must also notice a window it was not given.
    TrainerConfig tc = cfg.trainer;
    tc.hyper.k = 3;
    LocalityReference ref(w0);
    RolloutProbe probe;
    (void)rollout(ref, h, stream, tc, nullptr, &probe);
    const bool sensitive = !testing::hygiene_violations(probe, stream, 2).empty();
    report(9, "state hygiene", violations == 0 && sensitive, since(t0),
           std::to_string(reads) + " reads checked over k in {" + std::to_string(cfg.trainer.hyper.k) + ",1,3}, " +
               std::to_string(violations) + " violations; narrowed window flagged: " + (sensitive ? "yes" : "no"));
}

}  // namespace

int main(int argc, char** argv) {
    const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
    RunConfig cfg = make_preset("desk");
    cfg.seed = 2024;
    cfg.validate();
    const Corpus corpus = generate_dataset(cfg);

    gradient_check();
    rank_one_factorization(cfg, corpus);
    reward_identities(cfg, corpus);
    micro_trajectory_gradient();
    if (quick) {
        std::printf("[SKIP] C5 to C7 (--quick)\n");
        const ModelWeights w0 = ModelWeights::initialize(cfg.model, 5);
        auto h = initial_hypernetwork(cfg, corpus, w0);
        testing::randomize_parameters(h, 3, 0.05);
        determinism();
        state_hygiene(cfg, corpus, w0, h);
    } else {
        const DeskRun d = desk_end_to_end(cfg);
        ablations(cfg, d);
        constant_edit_cost(cfg, d);
        determinism();
        state_hygiene(cfg, d.corpus, d.w0, d.trained.hypernet);
    }
    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
