#include "corpus.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "json.hpp"

namespace memlab::corpus {

using json = nlohmann::ordered_json;

TokenMode token_mode_from_string(std::string_view s) {
    if (s == "char") return TokenMode::Char;
    if (s == "word") return TokenMode::Word;
    fail(Errc::invalid_argument, "unknown token mode: " + std::string(s));
}

const char* token_mode_name(TokenMode m) {
    return m == TokenMode::Char ? "char" : "word";
}

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Test: return "test";
        case Split::Validation: return "validation";
    }
    return "?";
}

Split split_from_string(std::string_view s) {
    if (s == "train") return Split::Train;
    if (s == "test") return Split::Test;
    if (s == "validation" || s == "val") return Split::Validation;
    fail(Errc::invalid_argument, "unknown split: " + std::string(s));
}

std::vector<std::string> split_units(std::string_view text, TokenMode mode) {
    if (mode == TokenMode::Word) return split_words(text);
    std::vector<std::string> units;
    size_t i = 0;
    while (i < text.size()) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        size_t len = 1;
        if (c >= 0xF0) len = 4;
        else if (c >= 0xE0) len = 3;
        else if (c >= 0xC0) len = 2;
        if (i + len > text.size()) len = 1;  // tolerate malformed tails
        units.emplace_back(text.substr(i, len));
        i += len;
    }
    return units;
}

namespace {
const char* kReservedSymbols[Vocabulary::kReservedCount] = {"<pad>", "<bos>",
                                                            "<eos>", "<unk>"};
}

void Vocabulary::index_symbols() {
    index_.clear();
    index_.reserve(symbols_.size());
    for (size_t i = 0; i < symbols_.size(); ++i) {
        index_.emplace_back(symbols_[i], static_cast<int>(i));
    }
    std::sort(index_.begin(), index_.end());
}

Vocabulary Vocabulary::build(const std::vector<std::string>& records, TokenMode mode) {
    if (records.empty()) fail(Errc::invalid_argument, "empty corpus");
    Vocabulary v;
    v.mode_ = mode;
    for (const char* s : kReservedSymbols) v.symbols_.emplace_back(s);
    std::map<std::string, int> seen;
    for (const auto& rec : records) {
        for (auto& unit : split_units(normalize_text(rec), mode)) {
            if (seen.emplace(unit, 0).second) v.symbols_.push_back(unit);
        }
    }
    v.index_symbols();
    return v;
}

const std::string& Vocabulary::symbol(int id) const {
    if (id < 0 || id >= size()) fail(Errc::invalid_argument, "symbol id out of range");
    return symbols_[static_cast<size_t>(id)];
}

std::optional<int> Vocabulary::lookup(std::string_view unit) const {
    auto it = std::lower_bound(
        index_.begin(), index_.end(), unit,
        [](const auto& p, std::string_view u) { return p.first < u; });
    if (it != index_.end() && it->first == unit) return it->second;
    return std::nullopt;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
    std::vector<int> ids;
    for (auto& unit : split_units(text, mode_)) {
        auto id = lookup(unit);
        ids.push_back(id.value_or(kUnk));
    }
    return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
    std::string out;
    bool first = true;
    for (int id : ids) {
        if (id < 0 || id >= size()) fail(Errc::invalid_argument, "decode: id out of range");
        if (id < kReservedCount) continue;
        if (mode_ == TokenMode::Word && !first) out.push_back(' ');
        out += symbols_[static_cast<size_t>(id)];
        first = false;
    }
    return out;
}

std::string Vocabulary::to_json() const {
    json j;
    j["mode"] = token_mode_name(mode_);
    j["reserved"] = {{"pad", kPad}, {"bos", kBos}, {"eos", kEos}, {"unk", kUnk}};
    j["symbols"] = json::array();
    for (int i = kReservedCount; i < size(); ++i) {
        j["symbols"].push_back(symbols_[static_cast<size_t>(i)]);
    }
    return j.dump(2) + "\n";
}

Vocabulary Vocabulary::from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.contains("mode") || !j.contains("symbols")) {
        fail(Errc::format, "malformed vocabulary file");
    }
    Vocabulary v;
    v.mode_ = token_mode_from_string(j["mode"].get<std::string>());
    for (const char* s : kReservedSymbols) v.symbols_.emplace_back(s);
    for (const auto& s : j["symbols"]) v.symbols_.push_back(s.get<std::string>());
    v.index_symbols();
    return v;
}

const std::vector<size_t>& Corpus::split(Split s) const {
    switch (s) {
        case Split::Train: return train;
        case Split::Test: return test;
        case Split::Validation: return validation;
    }
    fail(Errc::internal, "bad split");
}

std::vector<int> Corpus::record_tokens(size_t pair_index) const {
    const auto& p = pairs.at(pair_index);
    std::vector<int> ids = p.x;
    ids.insert(ids.end(), p.y.begin(), p.y.end());
    return ids;
}

std::vector<RawRecord> load_records(const std::string& path) {
    const std::string contents = read_file(path);
    const bool jsonl = path.size() >= 6 && path.ends_with(".jsonl");
    std::vector<RawRecord> records;
    std::istringstream in(contents);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        RawRecord rec;
        if (jsonl) {
            json j = json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.is_object()) {
                fail(Errc::format, path + ":" + std::to_string(lineno) + ": bad JSONL row");
            }
            rec.id = j.contains("id") ? j["id"].get<std::string>()
                                      : "r" + std::to_string(lineno);
            if (j.contains("x") && j.contains("y")) {
                rec.pre_x = j["x"].get<std::string>();
                rec.pre_y = j["y"].get<std::string>();
                rec.text = *rec.pre_x + " " + *rec.pre_y;
            } else if (j.contains("text")) {
                rec.text = j["text"].get<std::string>();
            } else {
                fail(Errc::format, path + ":" + std::to_string(lineno) +
                                       ": row needs \"text\" or \"x\"+\"y\"");
            }
        } else {
            rec.id = "r" + std::to_string(lineno);
            rec.text = line;
        }
        records.push_back(std::move(rec));
    }
    if (records.empty()) fail(Errc::invalid_argument, "no records in " + path);
    return records;
}

SamplePair make_sample_pair(const Vocabulary& vocab, const RawRecord& record,
                            double split_ratio, int context_len) {
    if (split_ratio <= 0.0 || split_ratio >= 1.0) {
        fail(Errc::invalid_argument, "split_ratio must be in (0,1)");
    }
    SamplePair pair;
    pair.id = record.id;
    pair.raw = normalize_text(record.text);

    std::vector<int> ids = vocab.encode(pair.raw);
    if (static_cast<int>(ids.size()) > context_len) {
        ids.resize(static_cast<size_t>(context_len));
        pair.truncated = true;
        pair.raw = vocab.decode(ids);
    }
    if (ids.size() < 2) {
        fail(Errc::invalid_argument, "record '" + record.id + "' has fewer than 2 tokens");
    }

    if (record.pre_x && record.pre_y) {
        pair.x = vocab.encode(normalize_text(*record.pre_x));
        pair.y = vocab.encode(normalize_text(*record.pre_y));
        if (pair.y.empty()) fail(Errc::invalid_argument, "pre-split record with empty y");
        if (static_cast<int>(pair.x.size() + pair.y.size()) > context_len) {
            fail(Errc::invalid_argument, "pre-split record exceeds context length");
        }
        return pair;
    }

    const size_t n = ids.size();
    const size_t nx = static_cast<size_t>(
        std::ceil(split_ratio * static_cast<double>(n)));
    const size_t cut = std::min(nx, n - 1);  // keep y non-empty
    pair.x.assign(ids.begin(), ids.begin() + static_cast<long>(cut));
    pair.y.assign(ids.begin() + static_cast<long>(cut), ids.end());
    return pair;
}

void partition(Corpus& corpus, const Fractions& fractions, uint64_t seed) {
    const double fr[3] = {fractions.train, fractions.test, fractions.validation};
    double sum = 0.0;
    for (double f : fr) {
        if (f < 0.0 || f > 1.0) fail(Errc::invalid_argument, "fraction out of [0,1]");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) fail(Errc::invalid_argument, "fractions must sum to 1");

    std::vector<size_t> order(corpus.pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(Rng::derive(seed, "partition"));
    rng.shuffle(order);

    const size_t n = order.size();
    size_t n_train = static_cast<size_t>(std::floor(fr[0] * static_cast<double>(n)));
    size_t n_test = static_cast<size_t>(std::floor(fr[1] * static_cast<double>(n)));
    size_t n_val = static_cast<size_t>(std::floor(fr[2] * static_cast<double>(n)));
    // hand leftovers to the splits in order train, test, validation
    size_t leftover = n - (n_train + n_test + n_val);
    size_t* buckets[3] = {&n_train, &n_test, &n_val};
    for (size_t i = 0; leftover > 0; i = (i + 1) % 3) {
        if (fr[i] > 0.0) {
            ++*buckets[i];
            --leftover;
        }
    }

    corpus.train.assign(order.begin(), order.begin() + static_cast<long>(n_train));
    corpus.test.assign(order.begin() + static_cast<long>(n_train),
                       order.begin() + static_cast<long>(n_train + n_test));
    corpus.validation.assign(order.begin() + static_cast<long>(n_train + n_test),
                             order.end());
    corpus.split_seed = seed;
}

Corpus build_corpus(const std::vector<RawRecord>& records, const BuildOptions& opts) {
    if (records.empty()) fail(Errc::invalid_argument, "empty corpus");
    Corpus c;
    std::vector<std::string> texts;
    texts.reserve(records.size());
    for (const auto& r : records) texts.push_back(r.text);
    c.vocab = Vocabulary::build(texts, opts.mode);
    c.split_ratio = opts.split_ratio;
    c.context_len = opts.context_len;
    c.pairs.reserve(records.size());
    for (const auto& r : records) {
        c.pairs.push_back(make_sample_pair(c.vocab, r, opts.split_ratio, opts.context_len));
    }
    partition(c, opts.fractions, opts.seed);
    return c;
}

Corpus build_corpus_from_file(const std::string& data_path, const BuildOptions& opts) {
    return build_corpus(load_records(data_path), opts);
}

std::string splits_to_jsonl(const Corpus& corpus) {
    std::string out;
    json meta;
    meta["meta"] = {{"split_ratio", corpus.split_ratio},
                    {"context_len", corpus.context_len},
                    {"seed", corpus.split_seed}};
    out += meta.dump();
    out.push_back('\n');
    auto emit = [&](Split s) {
        for (size_t idx : corpus.split(s)) {
            json j;
            j["split"] = split_name(s);
            j["sample_id"] = corpus.pairs[idx].id;
            j["truncated"] = corpus.pairs[idx].truncated;
            out += j.dump();
            out.push_back('\n');
        }
    };
    emit(Split::Train);
    emit(Split::Test);
    emit(Split::Validation);
    return out;
}

void save_corpus(const Corpus& corpus, const std::string& vocab_path,
                 const std::string& splits_path) {
    write_file_atomic(vocab_path, corpus.vocab.to_json());
    write_file_atomic(splits_path, splits_to_jsonl(corpus));
}

Corpus open_corpus(const std::string& data_path, const std::string& vocab_path,
                   const std::string& splits_path) {
    Corpus c;
    c.vocab = Vocabulary::from_json(read_file(vocab_path));

    auto records = load_records(data_path);
    std::map<std::string, size_t> by_id;
    for (size_t i = 0; i < records.size(); ++i) by_id[records[i].id] = i;
    c.pairs.reserve(records.size());

    std::istringstream in(read_file(splits_path));
    std::string line;
    struct Row { Split split; std::string id; bool truncated; };
    std::vector<Row> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) fail(Errc::format, "malformed splits manifest row");
        if (j.contains("meta")) {
            c.split_ratio = j["meta"].value("split_ratio", 0.5);
            c.context_len = j["meta"].value("context_len", 256);
            c.split_seed = j["meta"].value("seed", uint64_t{0});
            continue;
        }
        rows.push_back({split_from_string(j["split"].get<std::string>()),
                        j["sample_id"].get<std::string>(),
                        j.value("truncated", false)});
    }
    if (rows.empty()) fail(Errc::format, "empty splits manifest");

    for (const auto& row : rows) {
        auto it = by_id.find(row.id);
        if (it == by_id.end()) {
            fail(Errc::state, "manifest sample_id missing from data file: " + row.id);
        }
        SamplePair pair = make_sample_pair(c.vocab, records[it->second],
                                           c.split_ratio, c.context_len);
        if (pair.truncated != row.truncated) {
            fail(Errc::state, "manifest truncation flag disagrees with data for " + row.id);
        }
        const size_t pair_index = c.pairs.size();
        c.pairs.push_back(std::move(pair));
        switch (row.split) {
            case Split::Train: c.train.push_back(pair_index); break;
            case Split::Test: c.test.push_back(pair_index); break;
            case Split::Validation: c.validation.push_back(pair_index); break;
        }
    }
    return c;
}

namespace {

std::string pseudo_word(Rng& rng) {
    static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m",
                                   "n", "p", "r", "s", "t", "v", "z"};
    static const char* vowels[] = {"a", "e", "i", "o", "u"};
    std::string w;
    const int syllables = 2 + static_cast<int>(rng.below(2));
    for (int s = 0; s < syllables; ++s) {
        w += onsets[rng.below(14)];
        w += vowels[rng.below(5)];
    }
    return w;
}

std::vector<std::string> word_pool(Rng& rng, size_t n) {
    std::vector<std::string> pool;
    std::map<std::string, int> seen;
    while (pool.size() < n) {
        std::string w = pseudo_word(rng);
        if (seen.emplace(w, 0).second) pool.push_back(std::move(w));
    }
    return pool;
}

}  // namespace

std::vector<RawRecord> synth_pairs_corpus(size_t n_records, uint64_t seed) {
    // Five records per sibling pair, plus unique filler records to reach the
    // requested count:
    //   - the majority sibling appears twice (separate ids, duplicated text,
    //     like repeated web pages), the minority sibling once; both share the
    //     3-word prefix x and differ in the branch suffix. Greedy prefix
    //     completion always recovers the majority branch, and the ~ln 2 prior
    //     makes arbitrary prompt tokens poor branch flippers.
    //   - each sibling also appears once with its branch word prepended
    //     (boilerplate context, like a byline); with ratio 0.5 these split as
    //     x = [tag subj verb obj] and are unambiguous. A one-token prompt
    //     equal to the branch word reproduces that memorized context exactly
    //     and reliably flips the plain siblings.
    // The minority branch alternates across pairs so a prompt inducer has to
    // cover both branch words rather than a single constant.
    const size_t n_pairs = std::max<size_t>(1, n_records / 5);
    Rng rng(Rng::derive(seed, "synth-pairs"));

    const auto subjects = word_pool(rng, n_pairs + n_records);
    const auto verbs = word_pool(rng, 14);
    const auto objects = word_pool(rng, 24);
    const auto uniques = word_pool(rng, 4 * n_pairs + 2 * n_records + 64);
    const std::string branch_a = "kestrel", branch_b = "marlow";

    std::vector<RawRecord> records;
    size_t u = 0;
    for (size_t p = 0; p < n_pairs; ++p) {
        const std::string x = subjects[p] + " " + verbs[rng.below(verbs.size())] + " " +
                              objects[rng.below(objects.size())];
        const std::string ya = branch_a + " " + uniques[u++] + " " + branch_a;
        const std::string yb = branch_b + " " + uniques[u++] + " " + branch_b;
        const std::string id = "p" + std::to_string(p);
        const bool minority_b = (p % 2 == 0);
        const std::string& maj = minority_b ? ya : yb;
        const std::string& min = minority_b ? yb : ya;
        const std::string maj_c = minority_b ? "a" : "b";
        const std::string min_c = minority_b ? "b" : "a";
        const std::string& maj_tag = minority_b ? branch_a : branch_b;
        const std::string& min_tag = minority_b ? branch_b : branch_a;
        records.push_back({id + maj_c, x + " " + maj, {}, {}});
        records.push_back({id + maj_c + "2", x + " " + maj, {}, {}});
        records.push_back({id + min_c, x + " " + min, {}, {}});
        records.push_back({id + maj_c + "t", maj_tag + " " + x + " " + maj, {}, {}});
        records.push_back({id + min_c + "t", min_tag + " " + x + " " + min, {}, {}});
    }
    // unique filler records top up the count (and widen the vocabulary)
    size_t f = 0;
    while (records.size() < n_records) {
        const std::string text = subjects[n_pairs + f] + " " +
                                 verbs[rng.below(verbs.size())] + " " + uniques[u] +
                                 " " + uniques[u + 1] + " " + uniques[u + 2];
        u += 3;
        records.push_back({"f" + std::to_string(f), text, {}, {}});
        ++f;
    }
    return records;
}

std::vector<RawRecord> synth_plain_corpus(size_t n_records, uint64_t seed) {
    Rng rng(Rng::derive(seed, "synth-plain"));
    const auto subjects = word_pool(rng, n_records);
    const auto verbs = word_pool(rng, 14);
    const auto fillers = word_pool(rng, 2 * n_records + 64);

    std::vector<RawRecord> records;
    size_t u = 0;
    for (size_t i = 0; i < n_records; ++i) {
        const std::string text = subjects[i] + " " + verbs[rng.below(verbs.size())] +
                                 " " + fillers[u] + " " + fillers[u + 1];
        u += 2;
        records.push_back({"r" + std::to_string(i), text, {}, {}});
    }
    return records;
}

std::string records_to_text(const std::vector<RawRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        out += r.text;
        out.push_back('\n');
    }
    return out;
}

}  // namespace memlab::corpus
