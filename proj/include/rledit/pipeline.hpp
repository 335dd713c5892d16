#pragma once

// End-to-end stages shared by the command-line tool and the acceptance suite.

#include <filesystem>
#include <string>
#include <vector>

#include "rledit/config.hpp"
#include "rledit/editor.hpp"
#include "rledit/trainer.hpp"

namespace rledit {

Corpus generate_dataset(const RunConfig& cfg);
void save_dataset(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_dataset(const std::filesystem::path& dir);
std::vector<std::filesystem::path> dataset_files(const std::filesystem::path& dir);

ModelWeights pretrain_model(const RunConfig& cfg, const Corpus& corpus);

// Fresh hypernetwork, normalizer fitted on the training pool under W_0.
HyperNetwork initial_hypernetwork(const RunConfig& cfg, const Corpus& corpus, const ModelWeights& w0);
TrainResult train_hypernetwork(const RunConfig& cfg, const Corpus& corpus, const ModelWeights& w0);

// The first edit.stream_len batches of the held-out stream and their records.
std::vector<RecordBatch> eval_stream(const RunConfig& cfg, const Corpus& corpus);
std::vector<KnowledgeRecord> flatten(const std::vector<RecordBatch>& stream);

struct VariantOutcome {
    Ablation ablation = Ablation::none;
    MetricsReport metrics;
    double mean_update_norm_sq = 0.0;
    int epochs_run = 0;
};

// Trains one ablation variant from W_0, edits the held-out stream and evaluates.
VariantOutcome run_variant(const RunConfig& cfg, const Corpus& corpus, const ModelWeights& w0, Ablation ablation);

void write_ablation_csv(const std::filesystem::path& path, const std::vector<VariantOutcome>& rows);

// manifest.txt: command, config, seed and content hashes of the inputs.
void write_manifest(const std::filesystem::path& dir, const std::string& command, const RunConfig& cfg,
                    const std::vector<std::filesystem::path>& inputs);

}  // namespace rledit
