#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <unistd.h>
#include <filesystem>
#include <fstream>

#include "corpus.hpp"
#include "support/synth.hpp"
#include "util.hpp"

using namespace memlab;
using corpus::Split;
using corpus::TokenMode;
using corpus::Vocabulary;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("memlab_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

void write(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

}  // namespace

TEST_CASE("vocabulary counting examples") {
    CHECK(Vocabulary::build({"ab"}, TokenMode::Char).size() == 6);
    CHECK(Vocabulary::build({"a a"}, TokenMode::Word).size() == 5);

    std::string distinct;
    for (char c = 'a'; c <= 'z'; ++c) distinct.push_back(c);
    // 26 distinct chars -> 26 + 4 reserved
    CHECK(Vocabulary::build({distinct}, TokenMode::Char).size() == 30);

    CHECK_THROWS_AS(Vocabulary::build({}, TokenMode::Char), Error);
}

TEST_CASE("vocabulary ordering is by first occurrence, reserved first") {
    const auto v = Vocabulary::build({"cab", "ba"}, TokenMode::Char);
    CHECK(v.symbol(0) == "<pad>");
    CHECK(v.symbol(3) == "<unk>");
    CHECK(v.symbol(4) == "c");
    CHECK(v.symbol(5) == "a");
    CHECK(v.symbol(6) == "b");
}

TEST_CASE("encode/decode round trip for in-vocabulary text") {
    const auto v = Vocabulary::build({"hello world"}, TokenMode::Char);
    CHECK(v.decode(v.encode("hello")) == "hello");
    CHECK(v.decode(v.encode("hello world")) == "hello world");

    const auto w = Vocabulary::build({"hello world again"}, TokenMode::Word);
    CHECK(w.decode(w.encode("world hello")) == "world hello");
}

TEST_CASE("unknown units map to UNK; decode skips reserved; bad ids rejected") {
    const auto v = Vocabulary::build({"ab"}, TokenMode::Char);
    const auto ids = v.encode("z");
    REQUIRE(ids.size() == 1);
    CHECK(ids[0] == Vocabulary::kUnk);
    CHECK(v.decode(ids) == "");
    CHECK(v.decode({}) == "");
    CHECK_THROWS_AS(v.decode({v.size()}), Error);
}

TEST_CASE("vocabulary JSON round trip") {
    const auto v = Vocabulary::build({"some words in here"}, TokenMode::Word);
    const auto w = Vocabulary::from_json(v.to_json());
    CHECK(w.size() == v.size());
    CHECK(w.mode() == v.mode());
    for (int i = 0; i < v.size(); ++i) CHECK(w.symbol(i) == v.symbol(i));
}

TEST_CASE("normalize_text collapses whitespace") {
    CHECK(normalize_text("  a\t\tb \n c  ") == "a b c");
    CHECK(normalize_text("") == "");
    CHECK(normalize_text(" \n ") == "");
}

TEST_CASE("make_sample_pair split arithmetic") {
    const auto v = Vocabulary::build({"abcdefghij"}, TokenMode::Char);
    auto pair10 = corpus::make_sample_pair(v, {"r", "abcdefghij", {}, {}}, 0.5, 256);
    CHECK(pair10.x.size() == 5);
    CHECK(pair10.y.size() == 5);

    auto pair9 = corpus::make_sample_pair(v, {"r", "abcdefghi", {}, {}}, 0.5, 256);
    CHECK(pair9.x.size() == 5);  // ceiling rule
    CHECK(pair9.y.size() == 4);

    auto pair2 = corpus::make_sample_pair(v, {"r", "ab", {}, {}}, 0.5, 256);
    CHECK(pair2.x.size() == 1);
    CHECK(pair2.y.size() == 1);

    CHECK_THROWS_AS(corpus::make_sample_pair(v, {"r", "a", {}, {}}, 0.5, 256), Error);
}

TEST_CASE("pair reconstruction: concat(x, y) decodes to the normalized record") {
    const auto records = synth::pairs_corpus(20, 3);
    corpus::BuildOptions opts;
    opts.mode = TokenMode::Word;
    const auto c = corpus::build_corpus(records, opts);
    for (const auto& p : c.pairs) {
        std::vector<int> all = p.x;
        all.insert(all.end(), p.y.begin(), p.y.end());
        CHECK(c.vocab.decode(all) == p.raw);
    }
}

TEST_CASE("records longer than the context are truncated and flagged") {
    const auto v = Vocabulary::build({"abcdefghij"}, TokenMode::Char);
    auto p = corpus::make_sample_pair(v, {"r", "abcdefghij", {}, {}}, 0.5, 6);
    CHECK(p.truncated);
    CHECK(p.x.size() + p.y.size() == 6);
    CHECK(p.raw == "abcdef");
}

TEST_CASE("partition sizes, determinism, and seed sensitivity") {
    const auto records = synth::plain_corpus(100, 7);
    corpus::BuildOptions opts;
    opts.mode = TokenMode::Word;
    opts.fractions = {0.8, 0.1, 0.1};
    opts.seed = 42;
    auto c1 = corpus::build_corpus(records, opts);
    CHECK(c1.train.size() == 80);
    CHECK(c1.test.size() == 10);
    CHECK(c1.validation.size() == 10);

    auto c2 = corpus::build_corpus(records, opts);
    CHECK(c1.train == c2.train);
    CHECK(c1.test == c2.test);
    CHECK(c1.validation == c2.validation);

    opts.seed = 43;
    auto c3 = corpus::build_corpus(records, opts);
    CHECK(c1.train != c3.train);  // overwhelming probability

    // disjoint ids across splits
    std::set<size_t> seen;
    for (auto idx : c1.train) CHECK(seen.insert(idx).second);
    for (auto idx : c1.test) CHECK(seen.insert(idx).second);
    for (auto idx : c1.validation) CHECK(seen.insert(idx).second);
    CHECK(seen.size() == 100);

    corpus::BuildOptions bad = opts;
    bad.fractions = {0.8, 0.3, 0.1};
    CHECK_THROWS_AS(corpus::build_corpus(records, bad), Error);
    bad.fractions = {1.2, -0.3, 0.1};
    CHECK_THROWS_AS(corpus::build_corpus(records, bad), Error);
}

TEST_CASE("txt and jsonl loading, pre-split pairs") {
    TempDir dir;
    write(dir.file("data.txt"), "first record here\nsecond record there\n\n");
    auto txt = corpus::load_records(dir.file("data.txt"));
    REQUIRE(txt.size() == 2);
    CHECK(txt[0].id == "r1");
    CHECK(txt[1].text == "second record there");

    write(dir.file("data.jsonl"),
          "{\"id\":\"a\",\"text\":\"alpha beta\"}\n"
          "{\"id\":\"b\",\"x\":\"gamma\",\"y\":\"delta epsilon\"}\n");
    auto jl = corpus::load_records(dir.file("data.jsonl"));
    REQUIRE(jl.size() == 2);
    CHECK(jl[0].id == "a");
    REQUIRE(jl[1].pre_x.has_value());

    corpus::BuildOptions opts;
    opts.mode = TokenMode::Word;
    opts.fractions = {1.0, 0.0, 0.0};
    auto c = corpus::build_corpus(jl, opts);
    const auto& presplit = c.pairs[1];
    CHECK(c.vocab.decode(presplit.x) == "gamma");
    CHECK(c.vocab.decode(presplit.y) == "delta epsilon");

    write(dir.file("bad.jsonl"), "{\"id\":\"a\"}\n");
    CHECK_THROWS_AS(corpus::load_records(dir.file("bad.jsonl")), Error);
    write(dir.file("empty.txt"), "\n\n");
    CHECK_THROWS_AS(corpus::load_records(dir.file("empty.txt")), Error);
}

TEST_CASE("corpus save/open round trip preserves splits and pairs") {
    TempDir dir;
    const auto records = synth::pairs_corpus(30, 11);
    write(dir.file("data.txt"), synth::records_to_text(records));

    corpus::BuildOptions opts;
    opts.mode = TokenMode::Word;
    opts.seed = 5;
    auto c = corpus::build_corpus_from_file(dir.file("data.txt"), opts);
    corpus::save_corpus(c, dir.file("vocab.json"), dir.file("splits.jsonl"));

    auto c2 = corpus::open_corpus(dir.file("data.txt"), dir.file("vocab.json"),
                                  dir.file("splits.jsonl"));
    CHECK(c2.vocab.size() == c.vocab.size());
    REQUIRE(c2.train.size() == c.train.size());
    REQUIRE(c2.pairs.size() == c.pairs.size());
    // same membership by id
    for (size_t i = 0; i < c.train.size(); ++i) {
        CHECK(c2.pairs[c2.train[i]].id == c.pairs[c.train[i]].id);
    }
    for (size_t i = 0; i < c.pairs.size(); ++i) {
        const auto& a = c.pairs[i];
        bool found = false;
        for (const auto& b : c2.pairs) {
            if (b.id == a.id) {
                CHECK(b.x == a.x);
                CHECK(b.y == a.y);
                found = true;
            }
        }
        CHECK(found);
    }
}
