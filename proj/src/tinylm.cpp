#include "dnp/tinylm.hpp"

#include <algorithm>
#include <cstring>
#include <memory>
#include <numbers>

namespace dnp::tinylm {

void ModelConfig::validate() const {
    require(vocab_size >= 1 && context_len >= 1 && n_layers >= 1 && d_model >= 1 && n_heads >= 1 &&
                d_ff >= 1,
            errc::config, "model config: all counts must be >= 1");
    require(d_model % n_heads == 0, errc::config, "model config: d_model must be divisible by n_heads");
}

const char * perturb_type_name(PerturbType t) {
    switch (t) {
        case PerturbType::noise: return "noise";
        case PerturbType::zero: return "zero";
        case PerturbType::scale: return "scale";
        case PerturbType::add_vector: return "add_vector";
    }
    return "?";
}

PerturbType perturb_type_from_name(const std::string & s) {
    if (s == "noise") return PerturbType::noise;
    if (s == "zero") return PerturbType::zero;
    if (s == "scale") return PerturbType::scale;
    if (s == "add_vector") return PerturbType::add_vector;
    fail(errc::input, "unknown perturbation type: " + s);
}

void Intervention::validate(const ModelConfig & cfg) const {
    require(magnitude >= 0.0, errc::input, "intervention: magnitude must be >= 0");
    require(int(strength.size()) <= cfg.n_layers, errc::input, "intervention: too many layers");
    bool any = false;
    for (const auto & layer : strength) {
        require(layer.empty() || int(layer.size()) == cfg.d_ff, errc::input,
                "intervention: strength vector must be empty or length d_ff");
        for (double s : layer) {
            require(s >= 0.0 && s <= 1.0, errc::input, "intervention: strengths must lie in [0,1]");
            any = any || s != 0.0;
        }
    }
    if (any && type == PerturbType::noise) {
        require(strength.size() <= sigma.size() || !sigma.empty(), errc::input,
                "intervention: noise requires per-layer sigma");
    }
    if (any && type == PerturbType::add_vector) {
        require(!add.empty(), errc::input, "intervention: add_vector requires add vectors");
    }
}

// ---------------------------------------------------------------------------
// init
// ---------------------------------------------------------------------------

static void init_mat(Mat & m, int rows, int cols, double std, Rng & rng) {
    m = Mat(rows, cols);
    for (auto & x : m.d) {
        x = std * rng.normal();
    }
}

Weights init_weights(const ModelConfig & cfg) {
    cfg.validate();
    Weights w;
    w.cfg = cfg;
    Rng rng(hash_combine(cfg.seed, 0x71171e5du));
    const double std = 0.02;
    init_mat(w.tok_emb, cfg.vocab_size, cfg.d_model, std, rng);
    init_mat(w.pos_emb, cfg.context_len, cfg.d_model, std, rng);
    w.blocks.resize(cfg.n_layers);
    for (auto & b : w.blocks) {
        b.ln1_g.assign(cfg.d_model, 1.0);
        b.ln1_b.assign(cfg.d_model, 0.0);
        b.ln2_g.assign(cfg.d_model, 1.0);
        b.ln2_b.assign(cfg.d_model, 0.0);
        init_mat(b.wq, cfg.d_model, cfg.d_model, std, rng);
        init_mat(b.wk, cfg.d_model, cfg.d_model, std, rng);
        init_mat(b.wv, cfg.d_model, cfg.d_model, std, rng);
        init_mat(b.wo, cfg.d_model, cfg.d_model, std, rng);
        init_mat(b.w1, cfg.d_ff, cfg.d_model, std, rng);
        b.b1.assign(cfg.d_ff, 0.0);
        init_mat(b.w2, cfg.d_model, cfg.d_ff, std, rng);
        b.b2.assign(cfg.d_model, 0.0);
    }
    w.lnf_g.assign(cfg.d_model, 1.0);
    w.lnf_b.assign(cfg.d_model, 0.0);
    return w;
}

std::vector<ParamRef> param_refs(Weights & w) {
    std::vector<ParamRef> refs;
    auto add_mat = [&](const std::string & name, Mat & m) {
        refs.push_back({name, m.d.data(), m.d.size(), {m.rows, m.cols}});
    };
    auto add_vec = [&](const std::string & name, std::vector<double> & v) {
        refs.push_back({name, v.data(), v.size(), {int(v.size())}});
    };
    add_mat("tok_emb", w.tok_emb);
    add_mat("pos_emb", w.pos_emb);
    for (int l = 0; l < int(w.blocks.size()); ++l) {
        auto & b = w.blocks[l];
        const std::string p = "block" + std::to_string(l) + ".";
        add_vec(p + "ln1_g", b.ln1_g);
        add_vec(p + "ln1_b", b.ln1_b);
        add_mat(p + "wq", b.wq);
        add_mat(p + "wk", b.wk);
        add_mat(p + "wv", b.wv);
        add_mat(p + "wo", b.wo);
        add_vec(p + "ln2_g", b.ln2_g);
        add_vec(p + "ln2_b", b.ln2_b);
        add_mat(p + "w1", b.w1);
        add_vec(p + "b1", b.b1);
        add_mat(p + "w2", b.w2);
        add_vec(p + "b2", b.b2);
    }
    add_vec("lnf_g", w.lnf_g);
    add_vec("lnf_b", w.lnf_b);
    return refs;
}

size_t param_count(const Weights & w) {
    size_t n = 0;
    for (const auto & r : param_refs(const_cast<Weights &>(w))) {
        n += r.n;
    }
    return n;
}

uint64_t weights_checksum(const Weights & w) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto & r : param_refs(const_cast<Weights &>(w))) {
        h = fnv1a(r.data, r.n * sizeof(double), h);
    }
    return h;
}

Weights zero_like(const Weights & w) {
    Weights z = w;
    for (auto & r : param_refs(z)) {
        std::fill(r.data, r.data + r.n, 0.0);
    }
    return z;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

static constexpr double kLnEps = 1e-5;

static constexpr double kInvSqrt2 = 1.0 / std::numbers::sqrt2;

static double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
}

static double gelu_grad(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    const double Phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    return Phi + x * phi;
}

struct LayerCache {
    Mat x_in;        // n x d
    Mat ln1_xhat;    // n x d
    std::vector<double> ln1_istd;
    Mat q, k, v;     // n x d
    std::vector<Mat> att_p;  // per head, n x n (rows i, cols j<=i)
    Mat ao;          // n x d, concatenated head outputs pre-projection
    Mat x_mid;       // n x d
    Mat ln2_xhat;
    std::vector<double> ln2_istd;
    Mat ffn_pre;     // n x d_ff, pre-GELU
    Mat ffn_hid;     // n x d_ff, post-GELU / post-edit
    bool clamped_last = false;
};

struct ForwardCache {
    int n = 0;
    std::vector<LayerCache> layers;
    Mat x_final;     // n x d, pre final LN
    Mat lnf_xhat;
    std::vector<double> lnf_istd;
    Mat hf;          // n x d, post final LN
    bool has_intervention = false;
};

static void layer_norm(std::span<const double> x, std::span<const double> g,
                       std::span<const double> b, std::span<double> out,
                       std::span<double> xhat, double & istd) {
    const int d = int(x.size());
    double mu = 0.0;
    for (double v : x) {
        mu += v;
    }
    mu /= d;
    double var = 0.0;
    for (double v : x) {
        var += (v - mu) * (v - mu);
    }
    var /= d;
    istd = 1.0 / std::sqrt(var + kLnEps);
    for (int i = 0; i < d; ++i) {
        xhat[i] = (x[i] - mu) * istd;
        out[i] = g[i] * xhat[i] + b[i];
    }
}

// apply the perturbation operator to the hidden vector of one layer at the
// final position; values with zero effective strength are left untouched so
// the identity cases are bit-exact
static void apply_edit(std::span<double> hid, const Intervention & iv, int layer) {
    if (layer >= int(iv.strength.size()) || iv.strength[layer].empty()) {
        return;
    }
    const auto & st = iv.strength[layer];
    const double m = iv.magnitude;
    switch (iv.type) {
        case PerturbType::zero: {
            const double mm = std::min(1.0, m);
            for (size_t i = 0; i < hid.size(); ++i) {
                if (mm * st[i] != 0.0) {
                    hid[i] *= 1.0 - mm * st[i];
                }
            }
            break;
        }
        case PerturbType::scale: {
            for (size_t i = 0; i < hid.size(); ++i) {
                if (m * st[i] != 0.0) {
                    hid[i] *= 1.0 + m * st[i];
                }
            }
            break;
        }
        case PerturbType::noise: {
            const double sig = layer < int(iv.sigma.size()) ? iv.sigma[layer] : 1.0;
            Rng rng(hash_combine(iv.rng_seed, uint64_t(layer) + 0x9e1));
            for (size_t i = 0; i < hid.size(); ++i) {
                const double g = rng.normal();  // drawn for every site, support-independent
                const double delta = m * st[i] * sig * g;
                if (delta != 0.0) {
                    hid[i] += delta;
                }
            }
            break;
        }
        case PerturbType::add_vector: {
            const auto & av = iv.add[layer];
            for (size_t i = 0; i < hid.size(); ++i) {
                const double delta = m * st[i] * av[i];
                if (delta != 0.0) {
                    hid[i] += delta;
                }
            }
            break;
        }
    }
}

FullForward forward_full(std::span<const int> tokens, const Weights & w, const Intervention * iv,
                         const std::vector<std::vector<double>> * clamp_ffn_last, bool keep_cache) {
    const auto & cfg = w.cfg;
    const int n = int(tokens.size());
    require(n > 0, errc::input, "forward: empty token sequence");
    require(n <= cfg.context_len, errc::input, "forward: sequence longer than context_len");
    for (int t : tokens) {
        require(t >= 0 && t < cfg.vocab_size, errc::input, "forward: token id out of range");
    }
    if (iv != nullptr) {
        iv->validate(cfg);
    }
    if (clamp_ffn_last != nullptr) {
        require(int(clamp_ffn_last->size()) == cfg.n_layers, errc::input,
                "forward: clamp needs one vector per layer");
    }

    const int d = cfg.d_model;
    const int nh = cfg.n_heads;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(dh));

    auto cache = std::make_shared<ForwardCache>();
    cache->n = n;
    cache->has_intervention = iv != nullptr;
    cache->layers.resize(cfg.n_layers);

    Mat x(n, d);
    for (int i = 0; i < n; ++i) {
        const double * te = w.tok_emb.row(tokens[i]);
        const double * pe = w.pos_emb.row(i);
        for (int c = 0; c < d; ++c) {
            x(i, c) = te[c] + pe[c];
        }
    }

    FullForward out;
    out.trace.ffn_hidden.resize(cfg.n_layers);
    out.trace.sigma.resize(cfg.n_layers);

    std::vector<double> h1(d), h2(d);
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto & lc = cache->layers[l];
        const auto & b = w.blocks[l];
        lc.x_in = x;
        lc.ln1_xhat = Mat(n, d);
        lc.ln1_istd.resize(n);
        lc.q = Mat(n, d);
        lc.k = Mat(n, d);
        lc.v = Mat(n, d);
        for (int i = 0; i < n; ++i) {
            layer_norm({x.row(i), size_t(d)}, b.ln1_g, b.ln1_b, h1,
                       {lc.ln1_xhat.row(i), size_t(d)}, lc.ln1_istd[i]);
            matvec(b.wq, h1, {lc.q.row(i), size_t(d)});
            matvec(b.wk, h1, {lc.k.row(i), size_t(d)});
            matvec(b.wv, h1, {lc.v.row(i), size_t(d)});
        }
        // causal attention per head
        lc.att_p.assign(nh, Mat(n, n));
        lc.ao = Mat(n, d);
        std::vector<double> srow;
        for (int h = 0; h < nh; ++h) {
            const int off = h * dh;
            for (int i = 0; i < n; ++i) {
                srow.assign(i + 1, 0.0);
                for (int j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (int c = 0; c < dh; ++c) {
                        s += lc.q(i, off + c) * lc.k(j, off + c);
                    }
                    srow[j] = s * scale;
                }
                softmax_inplace(srow);
                for (int j = 0; j <= i; ++j) {
                    lc.att_p[h](i, j) = srow[j];
                }
                for (int c = 0; c < dh; ++c) {
                    double acc = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        acc += srow[j] * lc.v(j, off + c);
                    }
                    lc.ao(i, off + c) = acc;
                }
            }
        }
        lc.x_mid = Mat(n, d);
        std::vector<double> attn_out(d);
        for (int i = 0; i < n; ++i) {
            matvec(b.wo, {lc.ao.row(i), size_t(d)}, attn_out);
            for (int c = 0; c < d; ++c) {
                lc.x_mid(i, c) = x(i, c) + attn_out[c];
            }
        }
        // feed-forward
        lc.ln2_xhat = Mat(n, d);
        lc.ln2_istd.resize(n);
        lc.ffn_pre = Mat(n, cfg.d_ff);
        lc.ffn_hid = Mat(n, cfg.d_ff);
        std::vector<double> ffn_out(d);
        for (int i = 0; i < n; ++i) {
            layer_norm({lc.x_mid.row(i), size_t(d)}, b.ln2_g, b.ln2_b, h2,
                       {lc.ln2_xhat.row(i), size_t(d)}, lc.ln2_istd[i]);
            matvec(b.w1, h2, {lc.ffn_pre.row(i), size_t(cfg.d_ff)});
            for (int c = 0; c < cfg.d_ff; ++c) {
                lc.ffn_pre(i, c) += b.b1[c];
                lc.ffn_hid(i, c) = gelu(lc.ffn_pre(i, c));
            }
            if (i == n - 1) {
                if (clamp_ffn_last != nullptr) {
                    const auto & cl = (*clamp_ffn_last)[l];
                    require(int(cl.size()) == cfg.d_ff, errc::input,
                            "forward: clamp vector must have length d_ff");
                    std::copy(cl.begin(), cl.end(), lc.ffn_hid.row(i));
                    lc.clamped_last = true;
                } else if (iv != nullptr) {
                    apply_edit({lc.ffn_hid.row(i), size_t(cfg.d_ff)}, *iv, l);
                }
                out.trace.ffn_hidden[l].assign(lc.ffn_hid.row(i), lc.ffn_hid.row(i) + cfg.d_ff);
                out.trace.sigma[l] = stddev(out.trace.ffn_hidden[l]);
            }
            matvec(b.w2, {lc.ffn_hid.row(i), size_t(cfg.d_ff)}, ffn_out);
            for (int c = 0; c < d; ++c) {
                x(i, c) = lc.x_mid(i, c) + ffn_out[c] + b.b2[c];
            }
        }
    }

    cache->x_final = x;
    cache->lnf_xhat = Mat(n, d);
    cache->lnf_istd.resize(n);
    cache->hf = Mat(n, d);
    for (int i = 0; i < n; ++i) {
        layer_norm({x.row(i), size_t(d)}, w.lnf_g, w.lnf_b, {cache->hf.row(i), size_t(d)},
                   {cache->lnf_xhat.row(i), size_t(d)}, cache->lnf_istd[i]);
    }
    out.logits = Mat(n, cfg.vocab_size);
    for (int i = 0; i < n; ++i) {
        matvec(w.tok_emb, {cache->hf.row(i), size_t(d)}, {out.logits.row(i), size_t(cfg.vocab_size)});
    }
    if (keep_cache) {
        out.cache = cache;
    }
    return out;
}

static void layer_norm_backward(std::span<const double> dy, std::span<const double> xhat,
                                double istd, std::span<const double> g, std::span<double> dg,
                                std::span<double> db, std::span<double> dx_acc) {
    const int d = int(dy.size());
    double m1 = 0.0, m2 = 0.0;
    std::vector<double> dxhat(d);
    for (int i = 0; i < d; ++i) {
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
        dxhat[i] = dy[i] * g[i];
        m1 += dxhat[i];
        m2 += dxhat[i] * xhat[i];
    }
    m1 /= d;
    m2 /= d;
    for (int i = 0; i < d; ++i) {
        dx_acc[i] += istd * (dxhat[i] - m1 - xhat[i] * m2);
    }
}

void backward_full(const FullForward & fwd, std::span<const int> tokens, const Weights & w,
                   const Mat & dlogits, Weights * grads,
                   std::vector<std::vector<double>> * clamp_grads) {
    require(fwd.cache != nullptr, errc::state, "backward: forward was run without keep_cache");
    require(!fwd.cache->has_intervention, errc::state,
            "backward: gradients through interventions are not supported");
    const auto & cfg = w.cfg;
    const auto & c = *fwd.cache;
    const int n = c.n;
    const int d = cfg.d_model;
    const int nh = cfg.n_heads;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(dh));

    if (clamp_grads != nullptr) {
        clamp_grads->assign(cfg.n_layers, std::vector<double>(cfg.d_ff, 0.0));
    }

    // tied head
    Mat dx(n, d);
    for (int i = 0; i < n; ++i) {
        matvec_t_acc(w.tok_emb, {dlogits.row(i), size_t(cfg.vocab_size)}, {dx.row(i), size_t(d)});
        if (grads != nullptr) {
            outer_acc(grads->tok_emb, {dlogits.row(i), size_t(cfg.vocab_size)},
                      {c.hf.row(i), size_t(d)});
        }
    }
    // final layer norm
    Mat dxf(n, d);
    {
        std::vector<double> dg_sink(d, 0.0), db_sink(d, 0.0);
        auto & dg = grads != nullptr ? grads->lnf_g : dg_sink;
        auto & db = grads != nullptr ? grads->lnf_b : db_sink;
        for (int i = 0; i < n; ++i) {
            layer_norm_backward({dx.row(i), size_t(d)}, {c.lnf_xhat.row(i), size_t(d)},
                                c.lnf_istd[i], w.lnf_g, dg, db, {dxf.row(i), size_t(d)});
        }
    }
    dx = dxf;

    std::vector<double> dq(d), dk_jtmp(d), dhid(cfg.d_ff), dpre(cfg.d_ff), dh2(d);
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto & lc = c.layers[l];
        const auto & b = w.blocks[l];
        Block * gb = grads != nullptr ? &grads->blocks[l] : nullptr;

        // dx currently holds d(loss)/d(x_out of this layer)
        Mat dmid = dx;  // residual passthrough
        for (int i = 0; i < n; ++i) {
            // ffn output: x_out = x_mid + w2 * hid + b2
            std::fill(dhid.begin(), dhid.end(), 0.0);
            matvec_t_acc(b.w2, {dx.row(i), size_t(d)}, dhid);
            if (gb != nullptr) {
                outer_acc(gb->w2, {dx.row(i), size_t(d)}, {lc.ffn_hid.row(i), size_t(cfg.d_ff)});
                for (int cc = 0; cc < d; ++cc) {
                    gb->b2[cc] += dx(i, cc);
                }
            }
            if (i == n - 1 && lc.clamped_last) {
                // the hidden at the final position was an independent input
                if (clamp_grads != nullptr) {
                    for (int cc = 0; cc < cfg.d_ff; ++cc) {
                        (*clamp_grads)[l][cc] += dhid[cc];
                    }
                }
                continue;  // edge into the GELU path is severed
            }
            for (int cc = 0; cc < cfg.d_ff; ++cc) {
                dpre[cc] = dhid[cc] * gelu_grad(lc.ffn_pre(i, cc));
            }
            std::fill(dh2.begin(), dh2.end(), 0.0);
            matvec_t_acc(b.w1, dpre, dh2);
            if (gb != nullptr) {
                // recompute ln2 output for the outer product
                std::vector<double> h2(d);
                for (int cc = 0; cc < d; ++cc) {
                    h2[cc] = b.ln2_g[cc] * lc.ln2_xhat(i, cc) + b.ln2_b[cc];
                }
                outer_acc(gb->w1, dpre, h2);
                for (int cc = 0; cc < cfg.d_ff; ++cc) {
                    gb->b1[cc] += dpre[cc];
                }
            }
            std::vector<double> dg_sink(d, 0.0), db_sink(d, 0.0);
            layer_norm_backward(dh2, {lc.ln2_xhat.row(i), size_t(d)}, lc.ln2_istd[i], b.ln2_g,
                                gb != nullptr ? std::span<double>(gb->ln2_g) : std::span<double>(dg_sink),
                                gb != nullptr ? std::span<double>(gb->ln2_b) : std::span<double>(db_sink),
                                {dmid.row(i), size_t(d)});
        }

        // attention: x_mid = x_in + wo * ao
        Mat dao(n, d);
        Mat dXin = dmid;  // residual passthrough
        for (int i = 0; i < n; ++i) {
            matvec_t_acc(b.wo, {dmid.row(i), size_t(d)}, {dao.row(i), size_t(d)});
            if (gb != nullptr) {
                outer_acc(gb->wo, {dmid.row(i), size_t(d)}, {lc.ao.row(i), size_t(d)});
            }
        }
        Mat dQ(n, d), dK(n, d), dV(n, d);
        std::vector<double> dp, ds;
        for (int h = 0; h < nh; ++h) {
            const int off = h * dh;
            for (int i = 0; i < n; ++i) {
                dp.assign(i + 1, 0.0);
                for (int j = 0; j <= i; ++j) {
                    double acc = 0.0;
                    for (int cc = 0; cc < dh; ++cc) {
                        acc += dao(i, off + cc) * lc.v(j, off + cc);
                    }
                    dp[j] = acc;
                    for (int cc = 0; cc < dh; ++cc) {
                        dV(j, off + cc) += lc.att_p[h](i, j) * dao(i, off + cc);
                    }
                }
                double pdots = 0.0;
                for (int j = 0; j <= i; ++j) {
                    pdots += lc.att_p[h](i, j) * dp[j];
                }
                ds.assign(i + 1, 0.0);
                for (int j = 0; j <= i; ++j) {
                    ds[j] = lc.att_p[h](i, j) * (dp[j] - pdots);
                }
                for (int j = 0; j <= i; ++j) {
                    for (int cc = 0; cc < dh; ++cc) {
                        dQ(i, off + cc) += ds[j] * lc.k(j, off + cc) * scale;
                        dK(j, off + cc) += ds[j] * lc.q(i, off + cc) * scale;
                    }
                }
            }
        }
        std::vector<double> dh1(d), h1(d);
        for (int i = 0; i < n; ++i) {
            std::fill(dh1.begin(), dh1.end(), 0.0);
            matvec_t_acc(b.wq, {dQ.row(i), size_t(d)}, dh1);
            matvec_t_acc(b.wk, {dK.row(i), size_t(d)}, dh1);
            matvec_t_acc(b.wv, {dV.row(i), size_t(d)}, dh1);
            if (gb != nullptr) {
                for (int cc = 0; cc < d; ++cc) {
                    h1[cc] = b.ln1_g[cc] * lc.ln1_xhat(i, cc) + b.ln1_b[cc];
                }
                outer_acc(gb->wq, {dQ.row(i), size_t(d)}, h1);
                outer_acc(gb->wk, {dK.row(i), size_t(d)}, h1);
                outer_acc(gb->wv, {dV.row(i), size_t(d)}, h1);
            }
            std::vector<double> dg_sink(d, 0.0), db_sink(d, 0.0);
            layer_norm_backward(dh1, {lc.ln1_xhat.row(i), size_t(d)}, lc.ln1_istd[i], b.ln1_g,
                                gb != nullptr ? std::span<double>(gb->ln1_g) : std::span<double>(dg_sink),
                                gb != nullptr ? std::span<double>(gb->ln1_b) : std::span<double>(db_sink),
                                {dXin.row(i), size_t(d)});
        }
        dx = dXin;
    }

    if (grads != nullptr) {
        for (int i = 0; i < n; ++i) {
            double * gt = grads->tok_emb.row(tokens[i]);
            double * gp = grads->pos_emb.row(i);
            for (int cc = 0; cc < d; ++cc) {
                gt[cc] += dx(i, cc);
                gp[cc] += dx(i, cc);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// public ops
// ---------------------------------------------------------------------------

ForwardResult forward(std::span<const int> tokens, const Weights & w) {
    auto full = forward_full(tokens, w);
    ForwardResult r;
    const int last = int(tokens.size()) - 1;
    r.logits.assign(full.logits.row(last), full.logits.row(last) + w.cfg.vocab_size);
    r.trace = std::move(full.trace);
    return r;
}

ForwardResult forward_with_intervention(std::span<const int> tokens, const Weights & w,
                                        const Intervention & iv) {
    auto full = forward_full(tokens, w, &iv);
    ForwardResult r;
    const int last = int(tokens.size()) - 1;
    r.logits.assign(full.logits.row(last), full.logits.row(last) + w.cfg.vocab_size);
    r.trace = std::move(full.trace);
    return r;
}

std::vector<int> generate_greedy(std::span<const int> prompt, int max_new_tokens, const Weights & w,
                                 const Intervention * iv, int eos_token) {
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (int step = 0; step < max_new_tokens; ++step) {
        if (int(seq.size()) >= w.cfg.context_len) {
            break;
        }
        auto r = iv != nullptr ? forward_with_intervention(seq, w, *iv) : forward(seq, w);
        const int next = argmax(r.logits);
        seq.push_back(next);
        out.push_back(next);
        if (next == eos_token) {
            break;
        }
    }
    return out;
}

std::vector<double> embed_input(std::span<const int> tokens, const Weights & w) {
    auto full = forward_full(tokens, w, nullptr, nullptr, true);
    const int n = int(tokens.size());
    std::vector<double> emb(w.cfg.d_model, 0.0);
    for (int i = 0; i < n; ++i) {
        const double * h = full.cache->hf.row(i);
        for (int c = 0; c < w.cfg.d_model; ++c) {
            emb[c] += h[c];
        }
    }
    for (auto & v : emb) {
        v /= n;
    }
    return emb;
}

double sequence_logprob(std::span<const int> tokens, const Weights & w) {
    require(tokens.size() >= 2, errc::input, "sequence_logprob: need at least 2 tokens");
    auto full = forward_full(tokens, w);
    const int n = int(tokens.size());
    double acc = 0.0;
    for (int i = 0; i + 1 < n; ++i) {
        acc += log_softmax_at({full.logits.row(i), size_t(w.cfg.vocab_size)}, tokens[i + 1]);
    }
    return acc / double(n - 1);
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

double sequence_loss_and_grad(std::span<const int> tokens, const Weights & w, Weights * grads) {
    require(tokens.size() >= 2, errc::input, "loss: need at least 2 tokens");
    auto full = forward_full(tokens, w, nullptr, nullptr, grads != nullptr);
    const int n = int(tokens.size());
    const int npred = n - 1;
    const int V = w.cfg.vocab_size;
    double loss = 0.0;
    Mat dlogits(n, V);
    for (int i = 0; i < npred; ++i) {
        std::vector<double> p(full.logits.row(i), full.logits.row(i) + V);
        softmax_inplace(p);
        loss -= std::log(std::max(p[tokens[i + 1]], 1e-300));
        if (grads != nullptr) {
            for (int c = 0; c < V; ++c) {
                dlogits(i, c) = p[c] / npred;
            }
            dlogits(i, tokens[i + 1]) -= 1.0 / npred;
        }
    }
    loss /= npred;
    if (grads != nullptr) {
        backward_full(full, tokens, w, dlogits, grads);
    }
    return loss;
}

double corpus_loss(const std::vector<std::vector<int>> & corpus, const Weights & w) {
    double acc = 0.0;
    for (const auto & seq : corpus) {
        acc += sequence_loss_and_grad(seq, w, nullptr);
    }
    return acc / double(corpus.size());
}

static double corpus_accuracy(const std::vector<std::vector<int>> & corpus, const Weights & w) {
    int hit = 0, total = 0;
    for (const auto & seq : corpus) {
        if (seq.size() < 3) {
            continue;
        }
        const int label_pos = int(seq.size()) - 2;
        std::span<const int> ctx(seq.data(), size_t(label_pos));
        auto r = forward(ctx, w);
        hit += argmax(r.logits) == seq[label_pos] ? 1 : 0;
        total += 1;
    }
    return total > 0 ? double(hit) / total : 0.0;
}

Weights train_tiny_lm(const std::vector<std::vector<int>> & corpus, const ModelConfig & cfg,
                      const TrainConfig & tc, TrainReport * report) {
    require(!corpus.empty(), errc::input, "train: empty corpus");
    Weights w = init_weights(cfg);
    Weights grads = zero_like(w);
    auto refs = param_refs(w);
    auto gref = param_refs(grads);

    size_t total = 0;
    for (const auto & r : refs) {
        total += r.n;
    }
    std::vector<double> m(total, 0.0), v(total, 0.0);
    Rng rng(hash_combine(cfg.seed, 0xada3u));

    if (report != nullptr) {
        report->checkpoint_losses.clear();
    }

    const int bs = std::min<int>(tc.batch_size, int(corpus.size()));
    for (int step = 1; step <= tc.steps; ++step) {
        for (auto & r : gref) {
            std::fill(r.data, r.data + r.n, 0.0);
        }
        double batch_loss = 0.0;
        for (int b = 0; b < bs; ++b) {
            const int idx = rng.uniform_int(int(corpus.size()));
            batch_loss += sequence_loss_and_grad(corpus[idx], w, &grads);
        }
        batch_loss /= bs;
        if (!std::isfinite(batch_loss)) {
            fail(errc::numeric, "train: loss diverged (non-finite) at step " + std::to_string(step));
        }
        const double bc1 = 1.0 - std::pow(tc.beta1, step);
        const double bc2 = 1.0 - std::pow(tc.beta2, step);
        size_t off = 0;
        for (size_t t = 0; t < refs.size(); ++t) {
            double * p = refs[t].data;
            const double * g = gref[t].data;
            for (size_t i = 0; i < refs[t].n; ++i) {
                const double gi = g[i] / bs;
                m[off + i] = tc.beta1 * m[off + i] + (1.0 - tc.beta1) * gi;
                v[off + i] = tc.beta2 * v[off + i] + (1.0 - tc.beta2) * gi * gi;
                p[i] -= tc.lr * (m[off + i] / bc1) / (std::sqrt(v[off + i] / bc2) + tc.eps);
            }
            off += refs[t].n;
        }
        if (report != nullptr && (step % tc.eval_every == 0 || step == tc.steps)) {
            report->checkpoint_losses.push_back(corpus_loss(corpus, w));
        }
    }
    if (report != nullptr) {
        report->final_loss = report->checkpoint_losses.empty() ? corpus_loss(corpus, w)
                                                               : report->checkpoint_losses.back();
        report->final_accuracy = corpus_accuracy(corpus, w);
    }
    return w;
}

}  // namespace dnp::tinylm
