#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "rledit/data.hpp"
#include "rledit/errors.hpp"

using namespace rledit;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "rledit_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

std::size_t parse_error_line(const std::filesystem::path& p) {
    try {
        load_records(p);
    } catch (const ParseError& e) {
        return e.line();
    }
    return 0;
}

const char* kGoodLine = R"({"record_id":1,"x":[10,2,0],"y":[20],"x_e":[2,10,0],"y_e":[20],"x_loc":[11,3,0],"y_loc":[30]})";

}  // namespace

TEST_CASE("corpus splits are disjoint and well formed") {
    CorpusConfig cc;
    cc.seed = 4;
    const Corpus c = generate_corpus(cc, 64);
    CHECK(c.eval.size() == 80);
    CHECK(c.train.size() == 120);
    CHECK(c.locality.size() == 60);
    CHECK(c.pretrain.size() == 55 * 8 - 260);
    std::set<std::pair<int, int>> keys;
    std::set<int> ids;
    for (const auto* set : {&c.eval, &c.train, &c.locality, &c.pretrain})
        for (const auto& r : *set) {
            CHECK(keys.insert({r.x[0], r.x[1]}).second);
            CHECK(ids.insert(r.record_id).second);
            CHECK(r.x.size() == 3);
            CHECK(r.x[2] == kSepToken);
            CHECK(r.x_e == std::vector<int>{r.x[1], r.x[0], kSepToken});
            CHECK(r.y == r.y_e);
            CHECK(r.y[0] != r.x[0]);
            CHECK(r.x_loc[0] != r.x[0]);
            CHECK(r.y[0] >= 1 + cc.n_relations);
            CHECK(r.y[0] < 1 + cc.n_relations + cc.n_subjects);
        }
    CHECK(c.lm_corpus().size() == 2 * (c.pretrain.size() + c.locality.size()));
}

TEST_CASE("locality prompts are learned facts") {
    CorpusConfig cc;
    const Corpus c = generate_corpus(cc, 64);
    std::set<std::vector<int>> learned;
    for (const auto& s : c.lm_corpus()) learned.insert(s.tokens);
    for (const auto* set : {&c.eval, &c.train})
        for (const auto& r : *set) CHECK(learned.count(r.locality().tokens) == 1);
}

TEST_CASE("generation is a pure function of the seed") {
    CorpusConfig a;
    a.seed = 9;
    CorpusConfig b = a;
    CHECK(generate_corpus(a, 64).eval == generate_corpus(b, 64).eval);
    b.seed = 10;
    CHECK_FALSE(generate_corpus(a, 64).eval == generate_corpus(b, 64).eval);
}

TEST_CASE("corpus errors name the field") {
    CorpusConfig cc;
    try {
        generate_corpus(cc, 32);
        FAIL("vocabulary too small");
    } catch (const ConfigError& e) {
        CHECK(e.field() == "model.vocab_size");
    }
    cc.n_eval = 1000;
    CHECK_THROWS_AS(generate_corpus(cc, 64), ConfigError);
}

TEST_CASE("records round trip through jsonl") {
    CorpusConfig cc;
    const Corpus c = generate_corpus(cc, 64);
    const auto p = temp_path("records.jsonl");
    save_records(c.eval, p);
    CHECK(load_records(p) == c.eval);
    save_records(std::vector<KnowledgeRecord>{}, p);
    CHECK(load_records(p).empty());
    write_file(p, std::string(kGoodLine) + "\n\n" + kGoodLine + "\n");
    CHECK(load_records(p).size() == 2);
}

TEST_CASE("malformed jsonl reports the line") {
    const auto p = temp_path("bad.jsonl");
    write_file(p, std::string(kGoodLine) + "\n{not json}\n");
    CHECK(parse_error_line(p) == 2);
    write_file(p, R"({"record_id":1,"x":[1],"y":[2],"x_e":[1],"y_e":[2],"x_loc":[1]})" "\n");
    CHECK(parse_error_line(p) == 1);
    write_file(p, std::string(kGoodLine) + "\n" +
                      R"({"record_id":1,"x":[1],"y":[2],"x_e":[1],"y_e":[2],"x_loc":[1],"y_loc":[3],"extra":1})");
    CHECK(parse_error_line(p) == 2);
    write_file(p, R"({"record_id":1,"x":[1.5],"y":[2],"x_e":[1],"y_e":[2],"x_loc":[1],"y_loc":[3]})");
    CHECK(parse_error_line(p) == 1);
    write_file(p, R"({"record_id":"a","x":[1],"y":[2],"x_e":[1],"y_e":[2],"x_loc":[1],"y_loc":[3]})");
    CHECK(parse_error_line(p) == 1);
    write_file(p, "[1,2]\n");
    CHECK(parse_error_line(p) == 1);
    CHECK_THROWS_AS(load_records(temp_path("missing.jsonl")), MissingFileError);
}

TEST_CASE("streams batch consecutively") {
    CorpusConfig cc;
    const Corpus c = generate_corpus(cc, 64);
    const auto s = make_stream(std::span(c.eval.data(), 10), 4);
    REQUIRE(s.size() == 3);
    CHECK(s[2].size() == 2);
    CHECK(s[1][0] == c.eval[4]);
    CHECK_THROWS_AS(make_stream(c.eval, 0), ConfigError);
}

TEST_CASE("sampler draws distinct records and is seeded") {
    CorpusConfig cc;
    const Corpus c = generate_corpus(cc, 64);
    StreamSampler a(c.train, 20, 4, 5), b(c.train, 20, 4, 5);
    const auto sa = a.next(), sb = b.next();
    CHECK(sa == sb);
    CHECK(sa.size() == 20);
    std::set<int> ids;
    for (const auto& batch : sa)
        for (const auto& r : batch) ids.insert(r.record_id);
    CHECK(ids.size() == 80);
    CHECK_FALSE(a.next() == sa);
    CHECK_THROWS_AS(StreamSampler(c.train, 40, 4, 1), ConfigError);
}

TEST_CASE("target resampling keeps prompts and avoids the subject") {
    CorpusConfig cc;
    const Corpus c = generate_corpus(cc, 64);
    StreamSampler s(c.train, 20, 4, 5);
    s.resample_targets(9, 63);
    std::map<int, KnowledgeRecord> by_id;
    for (const auto& r : c.train) by_id[r.record_id] = r;
    int changed = 0;
    for (int epoch = 0; epoch < 3; ++epoch)
        for (const auto& batch : s.next())
            for (const auto& r : batch) {
                const auto& orig = by_id.at(r.record_id);
                CHECK(r.x == orig.x);
                CHECK(r.x_e == orig.x_e);
                CHECK(r.x_loc == orig.x_loc);
                CHECK(r.y == r.y_e);
                CHECK(r.y[0] != r.x[0]);
                CHECK(r.y[0] >= 9);
                CHECK(r.y[0] <= 63);
                changed += r.y != orig.y;
            }
    CHECK(changed > 200);
    CHECK_THROWS_AS(s.resample_targets(5, 5), ConfigError);
}

TEST_CASE("content hash uses the git blob form") {
    const auto p = temp_path("hello.txt");
    write_file(p, "hello\n");
    CHECK(content_hash(p) == "ce013625030ba8dba906f756967f9e9ca394464a");
    write_file(p, "");
    CHECK(content_hash(p) == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    CHECK_THROWS_AS(content_hash(temp_path("nope.txt")), MissingFileError);
}

TEST_CASE("corpus manifest lists split sizes") {
    CorpusConfig cc;
    const Corpus c = generate_corpus(cc, 64);
    const auto m = corpus_manifest(cc, c);
    CHECK(m.find("eval_records = 80") != std::string::npos);
    CHECK(m.find("token.entities = 9..63") != std::string::npos);
}
