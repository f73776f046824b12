#pragma once

// Thin aliases over the core's deterministic synthetic corpora.

#include "corpus.hpp"

namespace synth {

inline std::vector<memlab::corpus::RawRecord> pairs_corpus(size_t n, uint64_t seed) {
    return memlab::corpus::synth_pairs_corpus(n, seed);
}

inline std::vector<memlab::corpus::RawRecord> plain_corpus(size_t n, uint64_t seed) {
    return memlab::corpus::synth_plain_corpus(n, seed);
}

inline std::string records_to_text(const std::vector<memlab::corpus::RawRecord>& r) {
    return memlab::corpus::records_to_text(r);
}

}  // namespace synth
