#include "dnp/common.hpp"

#include <algorithm>
#include <cstring>
#include <limits>

namespace dnp {

uint64_t splitmix64(uint64_t & x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

uint64_t hash_combine(uint64_t a, uint64_t b) {
    uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    return splitmix64(x);
}

uint64_t fnv1a(const void * data, size_t n, uint64_t h) {
    const auto * p = static_cast<const unsigned char *>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

void matvec(const Mat & w, std::span<const double> x, std::span<double> y) {
    for (int r = 0; r < w.rows; ++r) {
        const double * wr = w.row(r);
        double acc = 0.0;
        for (int c = 0; c < w.cols; ++c) {
            acc += wr[c] * x[c];
        }
        y[r] = acc;
    }
}

void matvec_t_acc(const Mat & w, std::span<const double> x, std::span<double> y) {
    for (int r = 0; r < w.rows; ++r) {
        const double * wr = w.row(r);
        const double xr = x[r];
        for (int c = 0; c < w.cols; ++c) {
            y[c] += wr[c] * xr;
        }
    }
}

void outer_acc(Mat & w, std::span<const double> a, std::span<const double> b) {
    for (int r = 0; r < w.rows; ++r) {
        double * wr = w.row(r);
        const double ar = a[r];
        for (int c = 0; c < w.cols; ++c) {
            wr[c] += ar * b[c];
        }
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

double sum(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) {
        acc += x;
    }
    return acc;
}

double mean(std::span<const double> v) {
    return v.empty() ? 0.0 : sum(v) / double(v.size());
}

double stddev(std::span<const double> v) {
    if (v.empty()) {
        return 0.0;
    }
    const double m = mean(v);
    double acc = 0.0;
    for (double x : v) {
        acc += (x - m) * (x - m);
    }
    return std::sqrt(acc / double(v.size()));
}

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double logit(double p) {
    return std::log(p / (1.0 - p));
}

void softmax_inplace(std::span<double> v) {
    const double mx = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (double & x : v) {
        x = std::exp(x - mx);
        s += x;
    }
    for (double & x : v) {
        x /= s;
    }
}

double logsumexp(std::span<const double> v) {
    const double mx = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) {
        s += std::exp(x - mx);
    }
    return mx + std::log(s);
}

double log_softmax_at(std::span<const double> v, int idx) {
    return v[idx] - logsumexp(v);
}

double entropy(std::span<const double> probs) {
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) {
            h -= p * std::log(p);
        }
    }
    return h;
}

int argmax(std::span<const double> v) {
    int best = 0;
    for (int i = 1; i < int(v.size()); ++i) {
        if (v[i] > v[best]) {
            best = i;
        }
    }
    return best;
}

}  // namespace dnp
