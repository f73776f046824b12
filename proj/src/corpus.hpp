#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "util.hpp"

namespace memlab::corpus {

enum class TokenMode { Char, Word };

TokenMode token_mode_from_string(std::string_view s);
const char* token_mode_name(TokenMode m);

// Closed token alphabet. Ids are dense, reserved symbols pinned to 0..3,
// content symbols ordered by first occurrence in the corpus.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kReservedCount = 4;

    static Vocabulary build(const std::vector<std::string>& records, TokenMode mode);

    int size() const { return static_cast<int>(symbols_.size()); }
    TokenMode mode() const { return mode_; }
    const std::string& symbol(int id) const;
    std::optional<int> lookup(std::string_view unit) const;

    // unknown units map to UNK; never throws on encode
    std::vector<int> encode(std::string_view text) const;
    // reserved ids are skipped; id >= size is rejected
    std::string decode(const std::vector<int>& ids) const;

    std::string to_json() const;
    static Vocabulary from_json(const std::string& text);

    Vocabulary() = default;

private:
    void index_symbols();

    TokenMode mode_ = TokenMode::Char;
    std::vector<std::string> symbols_;
    // flat index; small vocabularies keep this cheap
    std::vector<std::pair<std::string, int>> index_;
};

// splits a raw text into token units per mode (chars = UTF-8 code points)
std::vector<std::string> split_units(std::string_view text, TokenMode mode);

struct SamplePair {
    std::string id;
    std::vector<int> x;  // visible prefix
    std::vector<int> y;  // extraction target
    std::string raw;     // normalized record text
    bool truncated = false;
};

struct Fractions {
    double train = 0.8;
    double test = 0.1;
    double validation = 0.1;
};

enum class Split { Train, Test, Validation };
const char* split_name(Split s);
Split split_from_string(std::string_view s);

struct Corpus {
    Vocabulary vocab;
    std::vector<SamplePair> pairs;
    std::vector<size_t> train, test, validation;  // indices into pairs
    uint64_t split_seed = 0;
    double split_ratio = 0.5;
    int context_len = 256;

    const std::vector<size_t>& split(Split s) const;
    // full record token sequence (x ++ y)
    std::vector<int> record_tokens(size_t pair_index) const;
};

struct BuildOptions {
    TokenMode mode = TokenMode::Char;
    double split_ratio = 0.5;
    Fractions fractions;
    uint64_t seed = 0;
    int context_len = 256;  // pairs longer than this are truncated and flagged
};

// One record per line (.txt) or JSONL with {"id","text"} or pre-split
// {"id","x","y"}. Other extensions are treated as plain text.
struct RawRecord {
    std::string id;
    std::string text;          // whole record when not pre-split
    std::optional<std::string> pre_x, pre_y;
};

std::vector<RawRecord> load_records(const std::string& path);

SamplePair make_sample_pair(const Vocabulary& vocab, const RawRecord& record,
                            double split_ratio, int context_len);

void partition(Corpus& corpus, const Fractions& fractions, uint64_t seed);

Corpus build_corpus(const std::vector<RawRecord>& records, const BuildOptions& opts);
Corpus build_corpus_from_file(const std::string& data_path, const BuildOptions& opts);

// split manifest: one JSONL row per pair {"split","sample_id","truncated"}
std::string splits_to_jsonl(const Corpus& corpus);
void save_corpus(const Corpus& corpus, const std::string& vocab_path,
                 const std::string& splits_path);
Corpus open_corpus(const std::string& data_path, const std::string& vocab_path,
                   const std::string& splits_path);

// --- synthetic corpora --------------------------------------------------------

// Colliding sibling pairs: both records of a pair share a 3-word prefix and
// differ in the 3-word suffix, which opens with one of two global branch
// words and closes by repeating it. Greedy prefix-suffix extraction can only
// recover one sibling per pair, so prompt quality has measurable headroom.
std::vector<RawRecord> synth_pairs_corpus(size_t n_records, uint64_t seed);

// unique-prefix records; trivially extractable once memorized
std::vector<RawRecord> synth_plain_corpus(size_t n_records, uint64_t seed);

std::string records_to_text(const std::vector<RawRecord>& records);

}  // namespace memlab::corpus
