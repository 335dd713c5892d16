#pragma once

// Synthetic fact corpus over the toy vocabulary. A fact ties (subject,
// relation) to an object and has two surface forms:
//   fact:       [s, r, SEP] -> [o]
//   paraphrase: [r, s, SEP] -> [o]
// Token 0 is SEP, tokens 1..R are relations, the rest are entities.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rledit/model.hpp"

namespace rledit {

constexpr int kSepToken = 0;

struct KnowledgeRecord {
    int record_id = 0;
    std::vector<int> x, y;          // edit prompt and target
    std::vector<int> x_e, y_e;      // paraphrase of the same edit
    std::vector<int> x_loc, y_loc;  // unrelated fact and its reference answer

    TokenSequence edit() const { return make_sequence(x, y); }
    TokenSequence paraphrase() const { return make_sequence(x_e, y_e); }
    TokenSequence locality() const { return make_sequence(x_loc, y_loc); }
    bool operator==(const KnowledgeRecord&) const = default;
};

struct FactTemplate {
    int subject = 0;
    int relation = 0;
    int object = 0;

    std::vector<int> prompt() const { return {subject, relation, kSepToken}; }
    std::vector<int> paraphrase_prompt() const { return {relation, subject, kSepToken}; }
};

struct CorpusConfig {
    int n_subjects = 55;  // entity tokens, shared by subjects and objects
    int n_relations = 8;
    int n_eval = 80;
    int n_train = 120;
    int n_locality = 60;
    std::uint64_t seed = 0;

    int vocab_needed() const { return 1 + n_relations + n_subjects; }
};

struct Corpus {
    std::vector<KnowledgeRecord> pretrain;  // facts the language model learns
    std::vector<KnowledgeRecord> train;     // counterfactual edits for hypernetwork training
    std::vector<KnowledgeRecord> eval;      // held-out counterfactual edit stream
    std::vector<KnowledgeRecord> locality;  // learned facts reserved for specificity

    // Both surface forms of every pretrain and locality fact.
    std::vector<TokenSequence> lm_corpus() const;
};

// Throws ConfigError when the vocabulary cannot hold the tokens or the
// (subject, relation) grid is too small for the requested splits.
Corpus generate_corpus(const CorpusConfig& cfg, int vocab_size);

// JSON Lines, one record per line. load_records throws MissingFileError or
// ParseError naming the offending line; an empty file yields no records.
void save_records(std::span<const KnowledgeRecord> records, const std::filesystem::path& path);
std::vector<KnowledgeRecord> load_records(const std::filesystem::path& path);

using RecordBatch = std::vector<KnowledgeRecord>;

// Consecutive batches of `batch_size`; the last may be shorter.
std::vector<RecordBatch> make_stream(std::span<const KnowledgeRecord> records, int batch_size);

// Draws a freshly shuffled stream of n batches from a record pool per call.
class StreamSampler {
public:
    StreamSampler(std::vector<KnowledgeRecord> pool, int stream_len, int batch_size, std::uint64_t seed);
    std::vector<RecordBatch> next();

    // Gives every drawn record a fresh target entity in [first, last] each
    // draw (never the subject), so the editor meets new targets every epoch.
    void resample_targets(int first_entity, int last_entity);

private:
    std::vector<KnowledgeRecord> pool_;
    int stream_len_;
    int batch_size_;
    std::mt19937_64 rng_;
    int first_entity_ = 0;
    int last_entity_ = -1;
};

// Hash of the file bytes in git's blob form: sha1("blob <size>\0" + bytes), hex.
std::string content_hash(const std::filesystem::path& path);

// Human-readable summary: set sizes, seed and token map.
std::string corpus_manifest(const CorpusConfig& cfg, const Corpus& corpus);

}  // namespace rledit
