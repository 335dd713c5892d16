#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "rledit/editor.hpp"
#include "rledit/errors.hpp"
#include "rledit/trainer.hpp"
#include "trajectory_support.hpp"

using namespace rledit;

namespace {

struct Setup {
    ModelConfig cfg;
    Corpus corpus;
    ModelWeights w0;

    Setup() {
        CorpusConfig cc;
        corpus = generate_corpus(cc, cfg.vocab_size);
        w0 = ModelWeights::initialize(cfg, 31);
    }
};

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "rledit_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("editing leaves theta untouched and builds no tape") {
    Setup s;
    auto h = HyperNetwork::init(s.cfg, 8, 3);
    calibrate_hypernetwork(h, s.w0, s.corpus.train, 4);
    testing::randomize_parameters(h, 4, 0.05);
    const auto before = h.clone();
    const auto stream = make_stream(std::span(s.corpus.eval.data(), 12), 4);
    const auto session = edit_stream(s.w0, h, stream);
    CHECK(h.bitwise_equal(before));
    CHECK(session.steps_applied == 3);
    CHECK(session.step_seconds.size() == 3);
    for (const auto& [name, t] : session.weights.tensors()) CHECK_FALSE(t.requires_grad());
    CHECK_FALSE(session.weights.bitwise_equal(s.w0));
    for (const auto& l : s.cfg.editable_layers) CHECK(session.cumulative_update_norm.at(l) > 0.0);
}

TEST_CASE("editing matches a manual chain of updates") {
    Setup s;
    auto h = HyperNetwork::init(s.cfg, 8, 3);
    calibrate_hypernetwork(h, s.w0, s.corpus.train, 4);
    testing::randomize_parameters(h, 5, 0.05);
    const auto stream = make_stream(std::span(s.corpus.eval.data(), 8), 4);
    ModelWeights w = s.w0;
    for (const auto& b : stream) w = apply_update(w, h.transform(collect_rank_one_factors(w, testing::edit_sequences(b))));
    CHECK(edit_stream(s.w0, h, stream).weights.bitwise_equal(w));
}

TEST_CASE("zero policy changes nothing") {
    Setup s;
    const auto h = HyperNetwork::init(s.cfg, 8, 3);
    const auto stream = make_stream(std::span(s.corpus.eval.data(), 8), 4);
    const auto session = edit_stream(s.w0, h, stream);
    CHECK(session.weights.bitwise_equal(s.w0));
    CHECK(session.mean_update_norm_sq() == 0.0);
}

TEST_CASE("metrics against a scalar reference") {
    Setup s;
    const std::span<const KnowledgeRecord> edited(s.corpus.eval.data(), 10);
    const std::span<const KnowledgeRecord> unrelated(s.corpus.locality.data(), 10);
    const ModelWeights w1 = ModelWeights::initialize(s.cfg, 32);
    const auto m = evaluate(w1, s.w0, edited, unrelated);
    int eff = 0, gen = 0, spec = 0;
    for (const auto& r : edited) {
        eff += greedy_decode(w1, r.x, 1) == r.y;
        gen += greedy_decode(w1, r.x_e, 1) == r.y_e;
    }
    for (const auto& r : unrelated) spec += greedy_decode(w1, r.x, 1) == greedy_decode(s.w0, r.x, 1);
    CHECK(m.efficacy == eff / 10.0);
    CHECK(m.generalization == gen / 10.0);
    CHECK(m.specificity == spec / 10.0);
    CHECK(m.records.size() == 10);

    const auto same = evaluate(s.w0, s.w0, edited, unrelated);
    CHECK(same.specificity == 1.0);
    CHECK(same.cf_efficacy == 0.0);
    CHECK_THROWS_AS(evaluate(s.w0, s.w0, edited, std::span<const KnowledgeRecord>{}), DegenerateInputError);
}

TEST_CASE("metric files") {
    Setup s;
    const auto m = evaluate(s.w0, s.w0, std::span(s.corpus.eval.data(), 5), std::span(s.corpus.locality.data(), 4));
    const auto p = temp_path("metrics.csv");
    m.write_csv(p);
    std::ifstream in(p);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(text.rfind("metric,value,n_records\n", 0) == 0);
    CHECK(text.find("specificity,1,4\n") != std::string::npos);
    const auto pj = temp_path("records.jsonl");
    m.write_records_jsonl(pj);
    std::ifstream jin(pj);
    int lines = 0;
    for (std::string line; std::getline(jin, line);) ++lines;
    CHECK(lines == 5);
    CHECK(m.table().find("efficacy") != std::string::npos);
}

TEST_CASE("fine-tuning baseline writes the edit into editable layers only") {
    Setup s;
    const auto stream = make_stream(std::span(s.corpus.eval.data(), 1), 1);
    const auto w = fine_tune_baseline(s.w0, stream, 30, 1.0);
    CHECK(exact_match(w, s.corpus.eval[0].edit()));
    CHECK(fine_tune_baseline(s.w0, stream, 0, 1.0).bitwise_equal(s.w0));
    for (const auto& [name, t] : s.w0.tensors()) {
        bool editable = false;
        for (const auto& l : s.cfg.editable_layers) editable |= l.weight_name() == name;
        if (!editable) CHECK(std::equal(t.values().begin(), t.values().end(), w.at(name).values().begin()));
    }
    CHECK_THROWS_AS(fine_tune_baseline(s.w0, stream, -1, 1.0), ContractError);
}
