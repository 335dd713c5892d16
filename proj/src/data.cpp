#include "rledit/data.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "rledit/errors.hpp"

namespace rledit {
namespace {

using nlohmann::json;

constexpr std::array<const char*, 7> kFields{"record_id", "x", "y", "x_e", "y_e", "x_loc", "y_loc"};

int pick(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

KnowledgeRecord make_record(int id, const FactTemplate& f, const FactTemplate& loc) {
    KnowledgeRecord r;
    r.record_id = id;
    r.x = f.prompt();
    r.y = {f.object};
    r.x_e = f.paraphrase_prompt();
    r.y_e = {f.object};
    r.x_loc = loc.prompt();
    r.y_loc = {loc.object};
    return r;
}

std::vector<int> int_array(const json& j, const char* field, const std::string& where, std::size_t line) {
    if (!j.is_array()) throw ParseError(where, line, std::string("field ") + field + " is not an array");
    std::vector<int> out;
    for (const auto& v : j) {
        if (!v.is_number_integer()) throw ParseError(where, line, std::string("field ") + field + " holds a non-integer");
        out.push_back(v.get<int>());
    }
    return out;
}

}  // namespace

std::vector<TokenSequence> Corpus::lm_corpus() const {
    std::vector<TokenSequence> out;
    for (const auto* set : {&pretrain, &locality}) {
        for (const auto& r : *set) {
            out.push_back(r.edit());
            out.push_back(r.paraphrase());
        }
    }
    return out;
}

Corpus generate_corpus(const CorpusConfig& cfg, int vocab_size) {
    if (cfg.n_subjects < 3) throw ConfigError("data.n_subjects", "must be at least 3");
    if (cfg.n_relations < 1) throw ConfigError("data.n_relations", "must be positive");
    if (cfg.n_eval < 0 || cfg.n_train < 0 || cfg.n_locality < 0) throw ConfigError("data.n_eval", "split sizes must be nonnegative");
    if (cfg.vocab_needed() > vocab_size) {
        throw ConfigError("model.vocab_size", "needs " + std::to_string(cfg.vocab_needed()) + " tokens for " +
                                                  std::to_string(cfg.n_subjects) + " entities and " +
                                                  std::to_string(cfg.n_relations) + " relations, have " +
                                                  std::to_string(vocab_size));
    }
    const int pairs = cfg.n_subjects * cfg.n_relations;
    const int reserved = cfg.n_eval + cfg.n_train + cfg.n_locality;
    if (reserved >= pairs) {
        throw ConfigError("data.n_subjects", "grid of " + std::to_string(pairs) + " (subject, relation) pairs cannot hold " +
                                                 std::to_string(reserved) + " reserved facts plus a pretraining set");
    }

    std::mt19937_64 rng(cfg.seed);
    const int first_entity = 1 + cfg.n_relations;
    const int last_entity = first_entity + cfg.n_subjects - 1;
    std::vector<FactTemplate> facts;
    for (int s = 0; s < cfg.n_subjects; ++s) {
        for (int r = 0; r < cfg.n_relations; ++r) {
            const int subject = first_entity + s;
            int object = pick(rng, first_entity, last_entity - 1);
            if (object >= subject) ++object;  // never the subject itself
            facts.push_back({subject, 1 + r, object});
        }
    }
    std::shuffle(facts.begin(), facts.end(), rng);

    const auto begin = facts.begin();
    const std::vector<FactTemplate> eval_facts(begin, begin + cfg.n_eval);
    const std::vector<FactTemplate> train_facts(begin + cfg.n_eval, begin + cfg.n_eval + cfg.n_train);
    const std::vector<FactTemplate> loc_facts(begin + cfg.n_eval + cfg.n_train, begin + reserved);
    const std::vector<FactTemplate> pre_facts(begin + reserved, facts.end());

    auto locality_partner = [&](int subject) {
        for (;;) {
            const auto& f = pre_facts[static_cast<std::size_t>(pick(rng, 0, static_cast<int>(pre_facts.size()) - 1))];
            if (f.subject != subject) return f;
        }
    };
    // Pretrain facts are over every subject, so a partner always exists.
    if (std::all_of(pre_facts.begin(), pre_facts.end(), [&](const FactTemplate& f) { return f.subject == pre_facts[0].subject; })) {
        throw ConfigError("data.n_subjects", "pretraining facts cover a single subject");
    }

    Corpus c;
    int next_id = 0;
    auto counterfactuals = [&](const std::vector<FactTemplate>& src, std::vector<KnowledgeRecord>& dst) {
        for (FactTemplate f : src) {
            // Neither the template object nor the subject itself.
            const int lo = std::min(f.object, f.subject), hi = std::max(f.object, f.subject);
            int cf = pick(rng, first_entity, last_entity - 2);
            if (cf >= lo) ++cf;
            if (cf >= hi) ++cf;
            f.object = cf;
            dst.push_back(make_record(next_id++, f, locality_partner(f.subject)));
        }
    };
    counterfactuals(eval_facts, c.eval);
    counterfactuals(train_facts, c.train);
    for (const auto& f : loc_facts) c.locality.push_back(make_record(next_id++, f, locality_partner(f.subject)));
    for (const auto& f : pre_facts) c.pretrain.push_back(make_record(next_id++, f, locality_partner(f.subject)));
    return c;
}

void save_records(std::span<const KnowledgeRecord> records, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw MissingFileError(path.string());
    for (const auto& r : records) {
        json j = json::object();
        j["record_id"] = r.record_id;
        j["x"] = r.x;
        j["y"] = r.y;
        j["x_e"] = r.x_e;
        j["y_e"] = r.y_e;
        j["x_loc"] = r.x_loc;
        j["y_loc"] = r.y_loc;
        out << j.dump() << '\n';
    }
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<KnowledgeRecord> load_records(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingFileError(path.string());
    const std::string where = path.string();
    std::vector<KnowledgeRecord> out;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (std::all_of(text.begin(), text.end(), [](unsigned char ch) { return std::isspace(ch); })) continue;
        json j;
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ParseError(where, line, std::string("invalid JSON: ") + e.what());
        }
        if (!j.is_object()) throw ParseError(where, line, "record is not a JSON object");
        for (const char* f : kFields)
            if (!j.contains(f)) throw ParseError(where, line, std::string("missing field ") + f);
        if (j.size() != kFields.size()) throw ParseError(where, line, "unexpected extra fields");
        if (!j["record_id"].is_number_integer()) throw ParseError(where, line, "record_id is not an integer");
        KnowledgeRecord r;
        r.record_id = j["record_id"].get<int>();
        r.x = int_array(j["x"], "x", where, line);
        r.y = int_array(j["y"], "y", where, line);
        r.x_e = int_array(j["x_e"], "x_e", where, line);
        r.y_e = int_array(j["y_e"], "y_e", where, line);
        r.x_loc = int_array(j["x_loc"], "x_loc", where, line);
        r.y_loc = int_array(j["y_loc"], "y_loc", where, line);
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<RecordBatch> make_stream(std::span<const KnowledgeRecord> records, int batch_size) {
    if (batch_size <= 0) throw ConfigError("hyper.batch_size", "must be positive");
    std::vector<RecordBatch> out;
    for (std::size_t i = 0; i < records.size(); i += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(records.size(), i + static_cast<std::size_t>(batch_size));
        out.emplace_back(records.begin() + static_cast<long>(i), records.begin() + static_cast<long>(end));
    }
    return out;
}

StreamSampler::StreamSampler(std::vector<KnowledgeRecord> pool, int stream_len, int batch_size, std::uint64_t seed)
    : pool_(std::move(pool)), stream_len_(stream_len), batch_size_(batch_size), rng_(seed) {
    if (stream_len <= 0) throw ConfigError("hyper.stream_len", "must be positive");
    if (batch_size <= 0) throw ConfigError("hyper.batch_size", "must be positive");
    if (pool_.size() < static_cast<std::size_t>(stream_len) * static_cast<std::size_t>(batch_size)) {
        throw ConfigError("hyper.stream_len", "training pool of " + std::to_string(pool_.size()) +
                                                  " records is smaller than stream_len * batch_size");
    }
}

std::vector<RecordBatch> StreamSampler::next() {
    std::shuffle(pool_.begin(), pool_.end(), rng_);
    const auto n = static_cast<std::size_t>(stream_len_) * static_cast<std::size_t>(batch_size_);
    std::vector<KnowledgeRecord> drawn(pool_.begin(), pool_.begin() + static_cast<long>(n));
    if (last_entity_ >= first_entity_) {
        for (auto& r : drawn) {
            const int subject = r.x.front();
            int obj = pick(rng_, first_entity_, last_entity_ - 1);
            if (obj >= subject) ++obj;
            r.y = {obj};
            r.y_e = {obj};
        }
    }
    return make_stream(drawn, batch_size_);
}

void StreamSampler::resample_targets(int first_entity, int last_entity) {
    if (last_entity <= first_entity) throw ConfigError("data.n_subjects", "target range needs two entities");
    first_entity_ = first_entity;
    last_entity_ = last_entity;
}

std::string content_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingFileError(path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');

    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (ctx == nullptr) throw std::runtime_error("EVP_MD_CTX_new failed");
    const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                    EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                    EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                    EVP_DigestFinal_ex(ctx, digest, &len) == 1;
    EVP_MD_CTX_free(ctx);
    if (!ok) throw std::runtime_error("sha1 digest failed");
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return hex.str();
}

std::string corpus_manifest(const CorpusConfig& cfg, const Corpus& corpus) {
    std::ostringstream o;
    o << "seed = " << cfg.seed << '\n'
      << "n_subjects = " << cfg.n_subjects << '\n'
      << "n_relations = " << cfg.n_relations << '\n'
      << "pretrain_records = " << corpus.pretrain.size() << '\n'
      << "train_records = " << corpus.train.size() << '\n'
      << "eval_records = " << corpus.eval.size() << '\n'
      << "locality_records = " << corpus.locality.size() << '\n'
      << "token.sep = " << kSepToken << '\n'
      << "token.relations = 1.." << cfg.n_relations << '\n'
      << "token.entities = " << 1 + cfg.n_relations << ".." << cfg.n_relations + cfg.n_subjects << '\n';
    return o.str();
}

}  // namespace rledit
