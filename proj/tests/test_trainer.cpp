#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "rledit/errors.hpp"
#include "rledit/trainer.hpp"
#include "support.hpp"
#include "trajectory_support.hpp"

using namespace rledit;
using namespace rledit::testing;

namespace {

struct Micro {
    ModelConfig cfg = micro_model_config();
    ModelWeights w0 = ModelWeights::initialize(cfg, 21);
    HyperNetwork h;
    TrainerConfig tc;

    explicit Micro(int n = 2, int k = 1) {
        h = HyperNetwork::init(cfg, 3, 5);
        const auto stream = micro_stream(n, 2);
        std::vector<KnowledgeRecord> pool;
        for (const auto& b : stream) pool.insert(pool.end(), b.begin(), b.end());
        calibrate_hypernetwork(h, w0, pool, 2);
        randomize_parameters(h, 9, 0.3);
        tc.hyper.k = k;
        tc.hyper.stream_len = n;
        tc.hyper.batch_size = 2;
        tc.hyper.eta = 1e-2;
    }
};

std::vector<KnowledgeRecord> flatten(const std::vector<RecordBatch>& s) {
    std::vector<KnowledgeRecord> out;
    for (const auto& b : s) out.insert(out.end(), b.begin(), b.end());
    return out;
}

}  // namespace

TEST_CASE("ablation names round trip") {
    for (Ablation a : kAllAblations) CHECK(parse_ablation(ablation_name(a)) == a);
    CHECK_THROWS_AS(parse_ablation("no_everything"), ConfigError);
    TrainerConfig tc;
    tc.hyper.k = 7;
    tc.hyper.eta = 0.5;
    CHECK(tc.effective_k() == 7);
    tc.ablation = Ablation::no_backtracking;
    CHECK(tc.effective_k() == 0);
    CHECK(tc.effective_eta() == 0.5);
    tc.ablation = Ablation::no_regularization;
    CHECK(tc.effective_k() == 7);
    CHECK(tc.effective_eta() == 0.0);
    tc.ablation = Ablation::no_rl;
    CHECK(tc.effective_k() == 0);
}

TEST_CASE("trainer config validation") {
    TrainerConfig tc;
    CHECK_NOTHROW(tc.validate());
    tc.epochs = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = {};
    tc.patience = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
}

TEST_CASE("trajectory gradient matches finite differences on the micro setup") {
    Micro m;
    const auto stream = micro_stream(2, 2);
    LocalityReference ref(m.w0);
    const auto rr = rollout(ref, m.h, stream, m.tc);
    const auto factors = trajectory_factors(m.w0, m.h, stream);
    CHECK(std::abs(frozen_factor_return(ref, m.h, stream, factors, m.tc) - rr.J.item()) < 1e-12);
    auto params = m.h.parameters();
    const auto analytic = analytic_gradient(rr.J, params);
    const auto numeric = numeric_gradient([&] { return frozen_factor_return(ref, m.h, stream, factors, m.tc); }, params);
    CHECK(relative_error(analytic, numeric) < 1e-3);
    double norm = 0.0;
    for (double g : analytic) norm += g * g;
    CHECK(norm > 0.0);
}

TEST_CASE("rollout reads only the current state and the backtracking window") {
    Micro m(6, 2);
    const auto stream = micro_stream(6, 2);
    LocalityReference ref(m.w0);
    RolloutProbe probe;
    const auto rr = rollout(ref, m.h, stream, m.tc, nullptr, &probe);
    CHECK(probe.states().size() == 7);
    CHECK(hygiene_violations(probe, stream, 2).empty());
    CHECK(rr.steps.size() == 6);
    // A window one batch too small flags the reads of the oldest batch.
    CHECK_FALSE(hygiene_violations(probe, stream, 1).empty());
}

TEST_CASE("hygiene checker flags stale weights") {
    Micro m(3, 1);
    const auto stream = micro_stream(3, 2);
    RolloutProbe probe;
    probe.on_state(0, m.w0);
    const auto w1 = m.w0.detached();
    probe.on_state(1, w1);
    const auto w2 = m.w0.detached();
    probe.on_state(2, w2);
    probe.on_read(3, RolloutProbe::Purpose::collect_factors, w1, std::span(&stream[2], 1));
    CHECK(hygiene_violations(probe, stream, 1).size() == 1);
}

TEST_CASE("rollout step count and breakdown consistency") {
    Micro m(3, 2);
    const auto stream = micro_stream(3, 2);
    LocalityReference ref(m.w0);
    const auto rr = rollout(ref, m.h, stream, m.tc);
    double sum = 0.0;
    for (const auto& s : rr.steps) sum += s.breakdown.r;
    CHECK(std::abs(rr.J.item() - sum) < 1e-12);
    CHECK(rr.steps[0].breakdown.l_back == 0.0);
    CHECK(rr.steps[1].breakdown.l_back > 0.0);
    CHECK(rr.steps[0].record_ids == std::vector<int>{0, 1});
}

TEST_CASE("training is deterministic and respects the epoch budget") {
    auto run = [] {
        Micro m(2, 1);
        m.tc.epochs = 4;
        m.tc.patience = 100;
        m.tc.seed = 3;
        const auto stream = micro_stream(4, 2);
        StreamSampler sampler(flatten(stream), 2, 2, 7);
        return train(m.w0, m.h, sampler, m.tc);
    };
    const auto a = run();
    const auto b = run();
    CHECK(a.log.size() == 4);
    CHECK(a.hypernet.bitwise_equal(b.hypernet));
    for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].J == b.log[i].J);
    CHECK_FALSE(a.early_stopped);
}

TEST_CASE("early stopping triggers after patience epochs without improvement") {
    Micro m(2, 1);
    m.tc.epochs = 50;
    m.tc.patience = 2;
    m.tc.min_delta = 1e9;
    StreamSampler sampler(flatten(micro_stream(2, 2)), 2, 2, 7);
    const auto res = train(m.w0, m.h, sampler, m.tc);
    CHECK(res.early_stopped);
    CHECK(res.log.size() == 3);
}

TEST_CASE("early stopping compares windowed means of J") {
    Micro m(2, 1);
    m.tc.epochs = 50;
    m.tc.patience = 2;
    m.tc.min_delta = 1e9;
    m.tc.convergence_window = 4;
    StreamSampler sampler(flatten(micro_stream(2, 2)), 2, 2, 7);
    const auto res = train(m.w0, m.h, sampler, m.tc);
    CHECK(res.early_stopped);
    CHECK(res.log.size() == 12);
    m.tc.convergence_window = 0;
    CHECK_THROWS_AS(m.tc.validate(), ConfigError);
}

TEST_CASE("diverging returns raise a training failure") {
    Micro m(2, 1);
    randomize_parameters(m.h, 4, 50.0);
    m.tc.hyper.eta = 1e6;
    StreamSampler sampler(flatten(micro_stream(2, 2)), 2, 2, 7);
    CHECK_THROWS_AS(train(m.w0, m.h, sampler, m.tc), TrainingFailure);
}

TEST_CASE("training raises the return on a fixed pool") {
    ModelConfig cfg = micro_model_config();
    const ModelWeights w0 = ModelWeights::initialize(cfg, 21);
    auto h = HyperNetwork::init(cfg, 4, 5);
    const auto stream = micro_stream(2, 2);
    calibrate_hypernetwork(h, w0, flatten(stream), 2);
    TrainerConfig tc;
    tc.hyper.k = 1;
    tc.hyper.stream_len = 2;
    tc.hyper.batch_size = 2;
    tc.hyper.lr_meta = 1e-2;
    tc.epochs = 40;
    tc.patience = 1000;
    StreamSampler sampler(flatten(stream), 2, 2, 7);
    const auto res = train(w0, h, sampler, tc);
    LocalityReference ref(w0);
    const double before = rollout(ref, h, stream, tc).J.item();
    const double after = rollout(ref, res.hypernet, stream, tc).J.item();
    CHECK(after > before);
}

TEST_CASE("no_rl baseline edits from W_0 at every step") {
    Micro m(2, 1);
    m.tc.ablation = Ablation::no_rl;
    m.tc.epochs = 2;
    StreamSampler sampler(flatten(micro_stream(2, 2)), 2, 2, 7);
    const auto res = train(m.w0, m.h, sampler, m.tc);
    REQUIRE(res.log.size() == 2);
    for (const auto& e : res.log)
        for (const auto& s : e.steps) CHECK(s.breakdown.l_back == 0.0);
}

TEST_CASE("checkpoints and the training log are written") {
    const auto dir = std::filesystem::temp_directory_path() / "rledit_tests" / "ckpt";
    std::filesystem::remove_all(dir);
    Micro m(2, 1);
    m.tc.epochs = 4;
    m.tc.patience = 100;
    m.tc.checkpoint_every = 2;
    m.tc.checkpoint_dir = dir;
    StreamSampler sampler(flatten(micro_stream(2, 2)), 2, 2, 7);
    const auto res = train(m.w0, m.h, sampler, m.tc);
    CHECK(std::filesystem::exists(dir / "hypernet_epoch_0002.rlh"));
    CHECK(std::filesystem::exists(dir / "hypernet_epoch_0004.rlh"));
    CHECK(HyperNetwork::load(dir / "hypernet_epoch_0004.rlh").bitwise_equal(res.hypernet));
    write_training_log(dir / "log.csv", res.log);
    std::ifstream in(dir / "log.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header.find("epoch") == 0);
}
