#pragma once

#include <cstdint>
#include <exception>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace memlab {

enum class Errc {
    invalid_argument,
    io,
    format,
    state,
    numeric,
    internal,
};

const char* errc_name(Errc c);

class Error : public std::runtime_error {
public:
    Error(Errc code, std::string message)
        : std::runtime_error(std::move(message)), code_(code) {}
    Errc code() const { return code_; }

private:
    Errc code_;
};

[[noreturn]] void fail(Errc code, const std::string& message);

// Deterministic RNG. mt19937_64 raw draws are pinned by the standard; the
// derived distributions below are implemented here because std::*_distribution
// output is implementation-defined and would break cross-toolchain
// reproducibility of checkpoints and pool files.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t u64() { return gen_(); }

    // uniform in [0, n), rejection-sampled to avoid modulo bias
    uint64_t below(uint64_t n);

    // uniform in [0, 1) with 53 bits
    double real() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    // standard normal, Box-Muller
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Stable seed derivation for named sub-streams.
    static uint64_t derive(uint64_t seed, std::string_view tag, uint64_t a = 0,
                           uint64_t b = 0);

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// shortest round-trip decimal representation (deterministic output files)
std::string fmt_double(double v);

// collapse whitespace runs to single spaces and trim; NFC is treated as
// identity (ASCII-scope corpora)
std::string normalize_text(std::string_view text);

std::vector<std::string> split_words(std::string_view text);

std::string csv_escape(std::string_view field);

std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, std::string_view contents);

// query/override the thread budget for parallel loops (0 = hardware default)
void set_threads(int n);
int thread_budget();

// Captures the first exception thrown inside a parallel loop body so it can
// be rethrown on the owning thread (exceptions must not escape OMP regions).
class ParallelGuard {
public:
    template <typename Fn>
    void run(Fn&& fn) noexcept {
        try {
            fn();
        } catch (...) {
            capture();
        }
    }
    void rethrow_if_any() const {
        if (eptr_) std::rethrow_exception(eptr_);
    }

private:
    void capture();
    std::exception_ptr eptr_;
};

}  // namespace memlab
