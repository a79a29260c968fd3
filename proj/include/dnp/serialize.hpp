#pragma once

#include "dnp/adamask.hpp"
#include "dnp/common.hpp"
#include "dnp/hppo.hpp"
#include "dnp/tinylm.hpp"

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace dnp::io {

// ---------------------------------------------------------------------------
// Versioned binary containers. Every file starts with an 8-byte magic tag and
// a u32 format version; loads reject unknown tags and versions. All integers
// and doubles are written in host byte order (artifacts are consumed on the
// machine that produced them), so save -> load -> save round-trips are
// byte-identical.
// ---------------------------------------------------------------------------

class BinWriter {
public:
    explicit BinWriter(const std::string & path);
    void magic(const char * tag, uint32_t version);  // tag must be 8 chars
    void u8(uint8_t x);
    void u32(uint32_t x);
    void u64(uint64_t x);
    void i64(int64_t x);
    void f64(double x);
    void str(const std::string & s);
    void dvec(std::span<const double> v);
    void close();

private:
    void raw(const void * p, size_t n);

    std::ofstream os_;
    std::string path_;
};

class BinReader {
public:
    explicit BinReader(const std::string & path);
    void magic(const char * tag, uint32_t expect_version);
    uint8_t u8();
    uint32_t u32();
    uint64_t u64();
    int64_t i64();
    double f64();
    std::string str();
    std::vector<double> dvec();
    void expect_end();

private:
    void raw(void * p, size_t n);

    std::ifstream is_;
    std::string path_;
};

// ---------------------------------------------------------------------------
// model weights
// ---------------------------------------------------------------------------

void save_weights(const std::string & path, tinylm::Weights & w);
tinylm::Weights load_weights(const std::string & path);

// ---------------------------------------------------------------------------
// hierarchical agent: policy/value parameters of both levels, both Adam
// states, the PPO configuration, progress counters, and the named RNG streams
// that the training loop owns (so a resumed run continues bit-exactly)
// ---------------------------------------------------------------------------

struct AgentCheckpoint {
    hppo::PPOConfig cfg;
    hppo::PolicyParams params;
    hppo::Adam opt_high;
    hppo::Adam opt_low;
    int64_t update_index = 0;
    int64_t episode_index = 0;
    std::vector<std::pair<std::string, std::array<uint64_t, 4>>> rng_states;

    std::array<uint64_t, 4> rng(const std::string & name) const;
};

void save_agent(const std::string & path, AgentCheckpoint & ck);
AgentCheckpoint load_agent(const std::string & path);

// ---------------------------------------------------------------------------
// adaptive mask: category layout, configuration, gate parameters and the
// REINFORCE reward baseline
// ---------------------------------------------------------------------------

void save_mask(const std::string & path, const adamask::MaskParams & p);
adamask::MaskParams load_mask(const std::string & path);

}  // namespace dnp::io
