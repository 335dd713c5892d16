#pragma once

// Lifelong editing with a frozen hypernetwork, and the edit-quality metrics.

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rledit/data.hpp"
#include "rledit/hypernet.hpp"

namespace rledit {

struct EditSessionState {
    ModelWeights weights;
    int steps_applied = 0;
    std::vector<double> step_seconds;
    std::vector<double> step_update_norm_sq;
    std::map<LayerSelector, double> cumulative_update_norm;  // sum of per-step Frobenius norms

    double mean_update_norm_sq() const;
    double mean_step_seconds() const;
};

// Applies the hypernetwork batch by batch. No tape is built and theta is only
// read. Throws TrainingFailure with the step index on a non-finite update.
EditSessionState edit_stream(const ModelWeights& w0, const HyperNetwork& h, std::span<const RecordBatch> stream);

struct RecordResult {
    int record_id = 0;
    bool efficacy = false;
    bool generalization = false;
    bool specificity = false;  // the record's own locality prompt
};

struct MetricsReport {
    double efficacy = 0.0;
    double generalization = 0.0;
    double specificity = 0.0;
    // Probability comparison against the unedited answer y0: P(y|x) > P(y0|x).
    double cf_efficacy = 0.0;
    double cf_generalization = 0.0;
    std::size_t n_edited = 0;
    std::size_t n_unrelated = 0;
    std::vector<RecordResult> records;
    double mean_edit_seconds = 0.0;

    std::string table() const;
    // Columns metric,value,n_records; no timing so runs compare bitwise.
    void write_csv(const std::filesystem::path& path) const;
    void write_records_jsonl(const std::filesystem::path& path) const;
};

// Efficacy and generalization are exact greedy matches of y on x and x_e.
// Specificity is the share of unrelated prompts whose greedy decode is the
// same under both weight sets.
MetricsReport evaluate(const ModelWeights& w_final, const ModelWeights& w0, std::span<const KnowledgeRecord> edited,
                       std::span<const KnowledgeRecord> unrelated);

// Plain gradient steps on each batch's edit NLL, editable layers only.
ModelWeights fine_tune_baseline(const ModelWeights& w0, std::span<const RecordBatch> stream, int steps_per_edit,
                                double lr);

}  // namespace rledit
