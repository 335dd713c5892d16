#include "rledit/editor.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "rledit/errors.hpp"

namespace rledit {
namespace {

double fraction(std::size_t pass, std::size_t total) {
    return total ? static_cast<double>(pass) / static_cast<double>(total) : 0.0;
}

double answer_log_prob(const ModelWeights& w, std::span<const int> prompt, std::span<const int> answer) {
    const TokenSequence seq = make_sequence(prompt, answer);
    return -answer_nll(w, seq).item() * static_cast<double>(answer.size());
}

// P(y|x) > P(y0|x) under w, y0 being what W_0 decodes.
bool beats_original(const ModelWeights& w, const ModelWeights& w0, const std::vector<int>& x, const std::vector<int>& y) {
    const std::vector<int> y0 = greedy_decode(w0, x, static_cast<int>(y.size()));
    if (y0.size() != y.size() || y0 == y) return false;
    return answer_log_prob(w, x, y) > answer_log_prob(w, x, y0);
}

bool same_decode(const ModelWeights& a, const ModelWeights& b, const std::vector<int>& x, std::size_t len) {
    return greedy_decode(a, x, static_cast<int>(len)) == greedy_decode(b, x, static_cast<int>(len));
}

}  // namespace

double EditSessionState::mean_update_norm_sq() const {
    if (step_update_norm_sq.empty()) return 0.0;
    return std::accumulate(step_update_norm_sq.begin(), step_update_norm_sq.end(), 0.0) /
           static_cast<double>(step_update_norm_sq.size());
}

double EditSessionState::mean_step_seconds() const {
    if (step_seconds.empty()) return 0.0;
    return std::accumulate(step_seconds.begin(), step_seconds.end(), 0.0) / static_cast<double>(step_seconds.size());
}

EditSessionState edit_stream(const ModelWeights& w0, const HyperNetwork& h, std::span<const RecordBatch> stream) {
    if (stream.empty()) throw DegenerateInputError("edit_stream: empty stream");
    ad::NoGradGuard no_tape;
    EditSessionState s;
    s.weights = w0.detached();
    for (std::size_t i = 0; i < stream.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<TokenSequence> seqs;
        for (const auto& r : stream[i]) seqs.push_back(r.edit());
        const RankOneFactors factors = collect_rank_one_factors(s.weights, seqs);
        const EditUpdate update = h.transform(factors);
        if (!update.all_finite()) throw TrainingFailure(static_cast<long>(i) + 1, "non-finite edit update");
        s.weights = apply_update(s.weights, update);
        s.step_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

        ++s.steps_applied;
        s.step_update_norm_sq.push_back(update.norm_sq());
        for (const auto& [layer, delta] : update.deltas) {
            double n = 0.0;
            for (double v : delta.values()) n += v * v;
            s.cumulative_update_norm[layer] += std::sqrt(n);
        }
    }
    return s;
}

MetricsReport evaluate(const ModelWeights& w_final, const ModelWeights& w0, std::span<const KnowledgeRecord> edited,
                       std::span<const KnowledgeRecord> unrelated) {
    if (edited.empty() || unrelated.empty()) throw DegenerateInputError("evaluate: empty record set");
    ad::NoGradGuard no_tape;
    MetricsReport m;
    m.n_edited = edited.size();
    m.n_unrelated = unrelated.size();
    std::size_t eff = 0, gen = 0, cf_eff = 0, cf_gen = 0, spec = 0;
    for (const auto& r : edited) {
        RecordResult rr;
        rr.record_id = r.record_id;
        rr.efficacy = exact_match(w_final, r.edit());
        rr.generalization = exact_match(w_final, r.paraphrase());
        rr.specificity = same_decode(w_final, w0, r.x_loc, r.y_loc.size());
        eff += rr.efficacy;
        gen += rr.generalization;
        cf_eff += beats_original(w_final, w0, r.x, r.y);
        cf_gen += beats_original(w_final, w0, r.x_e, r.y_e);
        m.records.push_back(rr);
    }
    for (const auto& r : unrelated) spec += same_decode(w_final, w0, r.x, r.y.size());
    m.efficacy = fraction(eff, edited.size());
    m.generalization = fraction(gen, edited.size());
    m.cf_efficacy = fraction(cf_eff, edited.size());
    m.cf_generalization = fraction(cf_gen, edited.size());
    m.specificity = fraction(spec, unrelated.size());
    return m;
}

std::string MetricsReport::table() const {
    std::ostringstream o;
    char line[128];
    std::snprintf(line, sizeof line, "%-20s %8s %10s\n", "metric", "value", "n_records");
    o << line;
    auto row = [&](const char* name, double v, std::size_t n) {
        std::snprintf(line, sizeof line, "%-20s %8.4f %10zu\n", name, v, n);
        o << line;
    };
    row("efficacy", efficacy, n_edited);
    row("generalization", generalization, n_edited);
    row("specificity", specificity, n_unrelated);
    row("cf_efficacy", cf_efficacy, n_edited);
    row("cf_generalization", cf_generalization, n_edited);
    if (mean_edit_seconds > 0.0) {
        std::snprintf(line, sizeof line, "mean seconds per edit: %.6f\n", mean_edit_seconds);
        o << line;
    }
    return o.str();
}

void MetricsReport::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw MissingFileError(path.string());
    out << "metric,value,n_records\n";
    auto row = [&](const char* name, double v, std::size_t n) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%s,%.10g,%zu\n", name, v, n);
        out << buf;
    };
    row("efficacy", efficacy, n_edited);
    row("generalization", generalization, n_edited);
    row("specificity", specificity, n_unrelated);
    row("cf_efficacy", cf_efficacy, n_edited);
    row("cf_generalization", cf_generalization, n_edited);
}

void MetricsReport::write_records_jsonl(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw MissingFileError(path.string());
    for (const auto& r : records) {
        nlohmann::json j = nlohmann::json::object();
        j["record_id"] = r.record_id;
        j["efficacy"] = r.efficacy;
        j["generalization"] = r.generalization;
        j["specificity"] = r.specificity;
        out << j.dump() << '\n';
    }
}

ModelWeights fine_tune_baseline(const ModelWeights& w0, std::span<const RecordBatch> stream, int steps_per_edit,
                                double lr) {
    if (steps_per_edit < 0) throw ContractError("fine_tune_baseline: negative step count");
    ModelWeights w = w0.detached();
    if (steps_per_edit == 0) return w;
    ad::GradModeGuard tape(true);
    for (const auto& batch : stream) {
        std::vector<TokenSequence> seqs;
        for (const auto& r : batch) seqs.push_back(r.edit());
        for (int s = 0; s < steps_per_edit; ++s) {
            const ModelWeights local = w.detached(true);
            ad::backward(answer_nll(local, seqs));
            for (const auto& l : w.config().editable_layers) {
                const ad::Tensor& p = local.at(l);
                ad::Tensor next = p.detach(false);
                auto v = next.mutable_values();
                const auto g = p.grad();
                for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
                w.set(l, next);
            }
        }
    }
    return w;
}

}  // namespace rledit
