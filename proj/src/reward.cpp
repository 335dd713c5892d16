#include "rledit/reward.hpp"

#include <cmath>
#include <cstdio>

#include "rledit/errors.hpp"

namespace rledit {

void HyperParams::validate() const {
    if (k < 0) throw ConfigError("hyper.k", "must be nonnegative");
    if (!(mu > 0.0 && mu <= 1.0)) throw ConfigError("hyper.mu", "must lie in (0, 1]");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("hyper.gamma", "must lie in [0, 1]");
    if (!(lambda_loc >= 0.0)) throw ConfigError("hyper.lambda_loc", "must be nonnegative");
    if (!(eta >= 0.0)) throw ConfigError("hyper.eta", "must be nonnegative");
    if (!(lr_inner > 0.0)) throw ConfigError("hyper.lr_inner", "must be positive");
    if (!(lr_meta > 0.0)) throw ConfigError("hyper.lr_meta", "must be positive");
    if (stream_len <= 0) throw ConfigError("hyper.stream_len", "must be positive");
    if (batch_size <= 0) throw ConfigError("hyper.batch_size", "must be positive");
    if (!(noise_std >= 0.0)) throw ConfigError("hyper.noise_std", "must be nonnegative");
    if (rank <= 0) throw ConfigError("hyper.rank", "must be positive");
}

ad::Tensor LocalityReference::log_probs(std::span<const KnowledgeRecord> records) {
    const ModelConfig& cfg = w0_.config();
    const auto V = static_cast<std::size_t>(cfg.vocab_size);
    std::vector<double> stacked;
    for (const auto& r : records) {
        auto it = cache_.find(r.record_id);
        if (it == cache_.end()) {
            ad::NoGradGuard guard;
            const TokenSequence seq = r.locality();
            const ad::Tensor lp = forward_log_probs(w0_, SequenceBatch::build(std::span(&seq, 1), cfg));
            it = cache_.emplace(r.record_id, std::vector<double>(lp.values().begin(), lp.values().end())).first;
        }
        stacked.insert(stacked.end(), it->second.begin(), it->second.end());
    }
    const std::size_t rows = stacked.size() / V;
    return ad::Tensor::from_values(rows, V, std::move(stacked));
}

namespace {

// Rows of one stacked forward: paraphrases then locality prompts per batch.
struct StackedLosses {
    std::vector<ad::Tensor> l_edit, l_loc;
};

StackedLosses stacked_losses(const ModelWeights& cur, LocalityReference& ref, std::span<const RecordBatch> batches) {
    const ModelConfig& cfg = cur.config();
    const auto V = static_cast<std::size_t>(cfg.vocab_size);
    std::vector<TokenSequence> seqs;
    std::vector<std::pair<std::size_t, std::size_t>> para_span, loc_span;  // sequence index ranges
    for (const auto& b : batches) {
        if (b.empty()) throw DegenerateInputError("empty record batch");
        para_span.emplace_back(seqs.size(), seqs.size() + b.size());
        for (const auto& r : b) seqs.push_back(r.paraphrase());
        loc_span.emplace_back(seqs.size(), seqs.size() + b.size());
        for (const auto& r : b) seqs.push_back(r.locality());
    }
    const SequenceBatch batch = SequenceBatch::build(seqs, cfg);
    const ad::Tensor lp = forward_log_probs(cur, batch);

    std::vector<double> ref_values(batch.rows() * V, 0.0);
    for (std::size_t i = 0; i < batches.size(); ++i) {
        const ad::Tensor ref_lp = ref.log_probs(batches[i]);
        const std::size_t row0 = batch.segments[loc_span[i].first].offset;
        std::copy(ref_lp.values().begin(), ref_lp.values().end(), ref_values.begin() + static_cast<long>(row0 * V));
    }
    const ad::Tensor ref_all = ad::Tensor::from_values(batch.rows(), V, std::move(ref_values));

    auto rows_of = [&](std::pair<std::size_t, std::size_t> span, bool answers_only) {
        std::vector<bool> mask(batch.rows(), false);
        for (std::size_t s = span.first; s < span.second; ++s) {
            const auto& seg = batch.segments[s];
            for (std::size_t r = seg.offset; r < seg.offset + seg.length; ++r)
                mask[r] = answers_only ? static_cast<bool>(batch.answer_mask[r]) : true;
        }
        return mask;
    };
    StackedLosses out;
    for (std::size_t i = 0; i < batches.size(); ++i) {
        out.l_edit.push_back(ad::nll_loss(lp, batch.targets, rows_of(para_span[i], true)));
        out.l_loc.push_back(ad::kl_divergence(ref_all, lp, rows_of(loc_span[i], false)));
    }
    return out;
}

}  // namespace

BaseLoss base_loss(const ModelWeights& cur, LocalityReference& ref, std::span<const KnowledgeRecord> batch,
                   double lambda_loc) {
    const RecordBatch b(batch.begin(), batch.end());
    StackedLosses s = stacked_losses(cur, ref, std::span(&b, 1));
    BaseLoss out{s.l_edit[0], s.l_loc[0], {}};
    out.total = ad::add(out.l_edit, ad::scale(out.l_loc, lambda_loc));
    return out;
}

BaseLoss base_loss(const ModelWeights& cur, const ModelWeights& w0, const KnowledgeRecord& record, double lambda_loc) {
    BaseLoss out;
    out.l_edit = answer_nll(cur, record.paraphrase());
    out.l_loc = answer_kl(w0, cur, record.locality());
    out.total = ad::add(out.l_edit, ad::scale(out.l_loc, lambda_loc));
    return out;
}

std::vector<double> backtracking_weights(std::size_t n, double mu) {
    std::vector<double> w(n);
    double p = 1.0;
    for (std::size_t j = n; j-- > 0;) {
        p *= mu;
        w[j] = p;
    }
    return w;
}

ad::Tensor backtracking_loss(const ModelWeights& cur, LocalityReference& ref, std::span<const RecordBatch> history,
                             double mu, double lambda_loc) {
    if (history.empty()) return ad::Tensor::scalar(0.0);
    const StackedLosses s = stacked_losses(cur, ref, history);
    const std::vector<double> w = backtracking_weights(history.size(), mu);
    ad::Tensor total;
    for (std::size_t i = 0; i < history.size(); ++i) {
        const ad::Tensor term = ad::scale(ad::add(s.l_edit[i], ad::scale(s.l_loc[i], lambda_loc)), w[i]);
        total = total.defined() ? ad::add(total, term) : term;
    }
    return total;
}

StepReward step_reward(const BaseLoss& base, const ad::Tensor& back, const EditUpdate& update, double eta) {
    ad::Tensor reg;
    for (const auto& [layer, delta] : update.deltas) {
        const ad::Tensor n = ad::frobenius_norm_sq(delta);
        reg = reg.defined() ? ad::add(reg, n) : n;
    }
    if (!reg.defined()) reg = ad::Tensor::scalar(0.0);
    const ad::Tensor loss = ad::add(ad::add(base.total, back), ad::scale(reg, eta));
    StepReward out;
    out.r = ad::scale(loss, -1.0);
    auto& b = out.breakdown;
    b.l_edit = base.l_edit.item();
    b.l_loc = base.l_loc.item();
    b.l_base = base.total.item();
    b.l_back = back.item();
    b.reg = reg.item();
    b.r = out.r.item();
    return out;
}

ad::Tensor trajectory_return(std::span<const ad::Tensor> rewards, double gamma) {
    if (rewards.empty()) throw DegenerateInputError("trajectory_return: no rewards");
    ad::Tensor j;
    double g = 1.0;
    for (const auto& r : rewards) {
        g *= gamma;
        const ad::Tensor term = gamma == 1.0 ? r : ad::scale(r, g);
        j = j.defined() ? ad::add(j, term) : term;
    }
    return j;
}

std::string breakdown_csv_header() { return "epoch,step,l_edit,l_loc,l_base,l_back,reg,r"; }

std::string breakdown_csv_row(int epoch, int step, const RewardBreakdown& b) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%d,%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", epoch, step, b.l_edit, b.l_loc,
                  b.l_base, b.l_back, b.reg, b.r);
    return buf;
}

}  // namespace rledit
