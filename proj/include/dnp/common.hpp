#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dnp {

// ---------------------------------------------------------------------------
// errors
// ---------------------------------------------------------------------------

enum class errc { input, config, state, numeric, io };

class error : public std::runtime_error {
  public:
    error(errc kind, const std::string & msg) : std::runtime_error(msg), kind_(kind) {}
    errc kind() const { return kind_; }

  private:
    errc kind_;
};

[[noreturn]] inline void fail(errc kind, const std::string & msg) {
    throw error(kind, msg);
}

inline void require(bool cond, errc kind, const std::string & msg) {
    if (!cond) {
        fail(kind, msg);
    }
}

// ---------------------------------------------------------------------------
// deterministic rng
//
// xoshiro256++ seeded via splitmix64. Fully owned so that streams serialize
// bit-exactly into checkpoints and behave identically across platforms.
// normal() draws a fresh Box-Muller pair every call (no cached spare), so the
// entire state is the four words.
// ---------------------------------------------------------------------------

uint64_t splitmix64(uint64_t & x);

class Rng {
  public:
    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto & w : s_) {
            w = splitmix64(x);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // standard normal, Box-Muller without cached spare
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // uniform integer in [0, n)
    int uniform_int(int n) {
        require(n > 0, errc::input, "uniform_int: n must be positive");
        return int(next_u64() % uint64_t(n));
    }

    std::span<const uint64_t> state() const { return s_; }
    void set_state(std::span<const uint64_t> w) {
        require(w.size() == 4, errc::io, "rng state must be 4 words");
        for (int i = 0; i < 4; ++i) {
            s_[i] = w[i];
        }
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4] = {};
};

// order-sensitive 64-bit mix, used to derive per-episode / per-step seeds
uint64_t hash_combine(uint64_t a, uint64_t b);

// FNV-1a over raw bytes, used for weight checksums and config hashes
uint64_t fnv1a(const void * data, size_t n, uint64_t h = 0xcbf29ce484222325ull);

// ---------------------------------------------------------------------------
// small dense math
// ---------------------------------------------------------------------------

// row-major matrix of doubles
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> d;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), d(size_t(r) * size_t(c), 0.0) {}

    double & operator()(int r, int c) { return d[size_t(r) * cols + c]; }
    double operator()(int r, int c) const { return d[size_t(r) * cols + c]; }
    double * row(int r) { return d.data() + size_t(r) * cols; }
    const double * row(int r) const { return d.data() + size_t(r) * cols; }
    size_t size() const { return d.size(); }
};

// named view over a parameter tensor, shared by optimizers, checkpoint
// writers and finite-difference checks
struct ParamRef {
    std::string name;
    double * data = nullptr;
    size_t n = 0;
    std::vector<int> shape;
};

// y = W x  (W: m x n, x: n, y: m)
void matvec(const Mat & w, std::span<const double> x, std::span<double> y);
// y = W^T x  (W: m x n, x: m, y: n), accumulates into y
void matvec_t_acc(const Mat & w, std::span<const double> x, std::span<double> y);
// W += outer(a, b)  (a: m, b: n)
void outer_acc(Mat & w, std::span<const double> a, std::span<const double> b);

double dot(std::span<const double> a, std::span<const double> b);
double sum(std::span<const double> v);
double mean(std::span<const double> v);
// population standard deviation
double stddev(std::span<const double> v);

double sigmoid(double x);
double logit(double p);

// in-place softmax; max-shifted, sums to 1
void softmax_inplace(std::span<double> v);
double logsumexp(std::span<const double> v);
// log softmax(v)[idx]
double log_softmax_at(std::span<const double> v, int idx);
// entropy of a categorical distribution (natural log)
double entropy(std::span<const double> probs);

int argmax(std::span<const double> v);

}  // namespace dnp
