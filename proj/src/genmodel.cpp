#include "vlplan/genmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace vlplan {

const char* variant_name(Variant v) { return v == Variant::OneStep ? "one_step" : "ar"; }

ModelConfig ModelConfig::desk_default(int grid) {
    ModelConfig cfg;
    cfg.grid = grid;
    cfg.text_vocab = Vocab(grid).size();
    cfg.codebook = kNumCellCodes;
    return cfg;
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

ParamLayout ParamLayout::build(const ModelConfig& cfg) {
    ParamLayout lay;
    std::size_t off = 0;
    auto add = [&](const std::string& name, int rows, int cols, bool decay) {
        TensorSpec t{name, rows, cols, off, decay};
        off += t.count();
        lay.manifest.push_back(t);
        return t.offset;
    };
    const int d = cfg.d_model;
    lay.text_tok_emb = add("text_tok_emb", cfg.text_vocab, d, true);
    lay.pos_emb = add("pos_emb", cfg.max_seq_len, d, true);
    lay.codebook_emb = add("codebook_emb", cfg.codebook, d, true);
    lay.grid_pos_emb = add("grid_pos_emb", cfg.n_cells(), d, true);
    lay.sem_proj = add("sem_proj", d, cfg.d_sem, true);
    lay.img_query_emb = add("img_query_emb", cfg.n_cells(), d, true);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Layer lo{};
        lo.ln1_g = add(p + "ln1_g", d, 0, false);
        lo.ln1_b = add(p + "ln1_b", d, 0, false);
        lo.wq = add(p + "attn_wq", d, d, true);
        lo.bq = add(p + "attn_bq", d, 0, false);
        lo.wk = add(p + "attn_wk", d, d, true);
        lo.bk = add(p + "attn_bk", d, 0, false);
        lo.wv = add(p + "attn_wv", d, d, true);
        lo.bv = add(p + "attn_bv", d, 0, false);
        lo.wo = add(p + "attn_wo", d, d, true);
        lo.bo = add(p + "attn_bo", d, 0, false);
        lo.ln2_g = add(p + "ln2_g", d, 0, false);
        lo.ln2_b = add(p + "ln2_b", d, 0, false);
        lo.w1 = add(p + "mlp_w1", cfg.d_ff(), d, true);
        lo.b1 = add(p + "mlp_b1", cfg.d_ff(), 0, false);
        lo.w2 = add(p + "mlp_w2", d, cfg.d_ff(), true);
        lo.b2 = add(p + "mlp_b2", d, 0, false);
        lay.layers.push_back(lo);
    }
    lay.ln_f_g = add("ln_f_g", d, 0, false);
    lay.ln_f_b = add("ln_f_b", d, 0, false);
    lay.text_head_w = add("text_head_w", cfg.text_vocab, d, true);
    lay.text_head_b = add("text_head_b", cfg.text_vocab, 0, false);
    lay.img_head_w = add("img_head_w", cfg.codebook, d, true);
    lay.img_head_b = add("img_head_b", cfg.codebook, 0, false);
    lay.total = off;
    return lay;
}

std::size_t param_count(const ModelConfig& cfg) { return ParamLayout::build(cfg).total; }

Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
    require(cfg.d_model % cfg.n_heads == 0, ErrorKind::BadConfig,
            "d_model must be divisible by n_heads");
    Model m;
    m.cfg = cfg;
    m.layout = ParamLayout::build(cfg);
    m.params.assign(m.layout.total, 0.0);
    Rng rng = Rng::derive(seed, 0x1417ull);
    const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
    for (const auto& t : m.layout.manifest) {
        double* p = m.params.data() + t.offset;
        if (t.cols > 0) {
            double sigma = 0.02;
            if (t.name.find("attn_wo") != std::string::npos ||
                t.name.find("mlp_w2") != std::string::npos)
                sigma *= resid_scale;
            for (std::size_t i = 0; i < t.count(); ++i) p[i] = rng.normal() * sigma;
        } else if (t.name.ends_with("_g")) {
            for (std::size_t i = 0; i < t.count(); ++i) p[i] = 1.0;
        }
        // biases and LayerNorm shifts stay zero
    }
    return m;
}

// ---------------------------------------------------------------------------
// Sequence building
// ---------------------------------------------------------------------------

SequenceBuilder::SequenceBuilder(const ModelConfig& cfg, const Vocab& vocab)
    : cfg_(cfg), vocab_(&vocab) {
    require(vocab.size() == cfg.text_vocab, ErrorKind::BadConfig,
            "vocab size does not match model config");
    require(vocab.grid() == cfg.grid, ErrorKind::BadConfig, "vocab grid does not match model");
}

void SequenceBuilder::push_words(BuiltSequence& seq, const std::string& text) const {
    for (int tok : vocab_->encode(text)) seq.slots.push_back(Slot{SlotKind::Text, tok, -1, -1});
}

void SequenceBuilder::push_text_token(BuiltSequence& seq, int token) {
    seq.slots.push_back(Slot{SlotKind::Text, token, -1, -1});
}

void SequenceBuilder::push_image_group(BuiltSequence& seq, const SymbolicState& s) const {
    const int group = static_cast<int>(seq.group_tokens.size());
    seq.group_tokens.push_back(tokenize(s));
    seq.group_sem.push_back(semantic_encode(render(s), cfg_.grid, cfg_.d_sem));
    seq.slots.push_back(Slot{SlotKind::Text, vocab_->img_open(), -1, -1});
    switch (cfg_.fuse) {
        case FuseMode::Full:
            seq.slots.push_back(Slot{SlotKind::Semantic, -1, -1, group});
            for (int c = 0; c < cfg_.n_cells(); ++c)
                seq.slots.push_back(
                    Slot{SlotKind::Spatial, seq.group_tokens.back().tokens[c], c, -1});
            break;
        case FuseMode::NoSe:
            for (int c = 0; c < cfg_.n_cells(); ++c)
                seq.slots.push_back(
                    Slot{SlotKind::Spatial, seq.group_tokens.back().tokens[c], c, -1});
            break;
        case FuseMode::NoEn:
            seq.slots.push_back(Slot{SlotKind::Semantic, -1, -1, group});
            seq.slots.push_back(Slot{SlotKind::PooledSpatial, -1, -1, group});
            break;
    }
    seq.slots.push_back(Slot{SlotKind::Text, vocab_->img_close(), -1, -1});
}

void SequenceBuilder::push_action_target(BuiltSequence& seq, const LanguageAction& a) const {
    for (int tok : a.tokens(*vocab_)) {
        seq.text_pos.push_back(static_cast<int>(seq.slots.size()) - 1);
        seq.text_target.push_back(tok);
        seq.slots.push_back(Slot{SlotKind::Text, tok, -1, -1});
    }
}

void SequenceBuilder::push_image_queries(BuiltSequence& seq, const SymbolicState* target) const {
    if (cfg_.variant == Variant::OneStep) {
        seq.query_begin = static_cast<int>(seq.slots.size());
        for (int c = 0; c < cfg_.n_cells(); ++c) {
            seq.image_pos.push_back(static_cast<int>(seq.slots.size()));
            seq.slots.push_back(Slot{SlotKind::Query, -1, c, -1});
        }
        if (target) seq.image_target = tokenize(*target).tokens;
        return;
    }
    // AR variant: teacher-forced next-token layout. Without a target there is
    // nothing to append; ar_sample_image grows the sequence itself.
    if (!target) return;
    const TokenImage toks = tokenize(*target);
    seq.slots.push_back(Slot{SlotKind::Text, vocab_->img_open(), -1, -1});
    for (int c = 0; c < cfg_.n_cells(); ++c) {
        seq.image_pos.push_back(static_cast<int>(seq.slots.size()) - 1);
        seq.image_target.push_back(toks.tokens[c]);
        if (c + 1 < cfg_.n_cells())
            seq.slots.push_back(Slot{SlotKind::Spatial, toks.tokens[c], c, -1});
    }
}

BuiltSequence SequenceBuilder::inverse_dyn(const SymbolicState& x_t, const LanguageAction& a_t,
                                           const SymbolicState& x_t1) const {
    BuiltSequence seq;
    push_words(seq, "what is the action between");
    push_image_group(seq, x_t);
    push_words(seq, "and");
    push_image_group(seq, x_t1);
    push_words(seq, "? please infer the actions that took place");
    push_action_target(seq, a_t);
    return seq;
}

BuiltSequence SequenceBuilder::forward_dyn(const SymbolicState& x_t, const LanguageAction& a_t,
                                           const SymbolicState* x_t1) const {
    BuiltSequence seq;
    push_words(seq, "what will happen if");
    push_image_group(seq, x_t);
    push_words(seq, "takes the action like");
    for (int tok : a_t.tokens(*vocab_)) push_text_token(seq, tok);
    push_words(seq, "? please generate an image of the next state");
    push_image_queries(seq, x_t1);
    return seq;
}

BuiltSequence SequenceBuilder::plan(const TaskSpec& g, const SymbolicState& x_t,
                                    const LanguageAction* a_t, const SymbolicState* x_t1,
                                    bool include_image) const {
    BuiltSequence seq;
    push_words(seq, "you are given the current image observation");
    push_image_group(seq, x_t);
    push_words(seq, "and the given task instruction :");
    for (int tok : vocab_->encode(g.instruction)) push_text_token(seq, tok);
    push_words(seq, ". please make the next step action decision and generate the next state image");
    if (a_t) {
        push_action_target(seq, *a_t);
        if (include_image) push_image_queries(seq, x_t1);
    }
    return seq;
}

BuiltSequence SequenceBuilder::build(PromptKind kind, const TaskSpec* g, const SymbolicState* x_t,
                                     const LanguageAction* a_t, const SymbolicState* x_t1) const {
    switch (kind) {
        case PromptKind::InverseDyn:
            require(x_t && a_t && x_t1, ErrorKind::MissingField,
                    "inverse dynamics needs x_t, a_t, x_t1");
            return inverse_dyn(*x_t, *a_t, *x_t1);
        case PromptKind::ForwardDyn:
            require(x_t && a_t, ErrorKind::MissingField, "forward dynamics needs x_t, a_t");
            return forward_dyn(*x_t, *a_t, x_t1);
        case PromptKind::Plan:
            require(g && x_t, ErrorKind::MissingField, "plan needs g, x_t");
            return plan(*g, *x_t, a_t, x_t1);
    }
    fail(ErrorKind::MissingField, "unknown prompt kind");
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

// Four accumulators break the reduction latency chain; the compiler
// vectorizes each lane.
inline double dot(const double* a, const double* b, int n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

inline void axpy(double alpha, const double* x, double* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// y[L,out] = x[L,in] * W[out,in]^T + b
void linear_forward(const double* x, const double* w, const double* b, double* y, int L, int in,
                    int out) {
    for (int i = 0; i < L; ++i) {
        const double* xi = x + static_cast<std::size_t>(i) * in;
        double* yi = y + static_cast<std::size_t>(i) * out;
        for (int o = 0; o < out; ++o) yi[o] = b[o] + dot(w + static_cast<std::size_t>(o) * in, xi, in);
    }
}

// dx += dy*W; dW += dy^T*x; db += sum(dy)
void linear_backward(const double* x, const double* w, const double* dy, double* dx, double* dw,
                     double* db, int L, int in, int out) {
    for (int i = 0; i < L; ++i) {
        const double* dyi = dy + static_cast<std::size_t>(i) * out;
        const double* xi = x + static_cast<std::size_t>(i) * in;
        double* dxi = dx + static_cast<std::size_t>(i) * in;
        for (int o = 0; o < out; ++o) {
            const double g = dyi[o];
            if (g == 0.0) continue;
            axpy(g, w + static_cast<std::size_t>(o) * in, dxi, in);
            axpy(g, xi, dw + static_cast<std::size_t>(o) * in, in);
            db[o] += g;
        }
    }
}

constexpr double kLnEps = 1e-5;

void layernorm_forward(const double* x, const double* g, const double* b, double* xhat,
                       double* rstd, double* y, int L, int d) {
    for (int i = 0; i < L; ++i) {
        const double* xi = x + static_cast<std::size_t>(i) * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += xi[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = xi[j] - mean;
            var += c * c;
        }
        var /= d;
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        rstd[i] = rs;
        double* xh = xhat + static_cast<std::size_t>(i) * d;
        double* yi = y + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) {
            xh[j] = (xi[j] - mean) * rs;
            yi[j] = g[j] * xh[j] + b[j];
        }
    }
}

// dx += backward(dy); dg/db accumulated.
void layernorm_backward(const double* xhat, const double* rstd, const double* g, const double* dy,
                        double* dx, double* dg, double* db, int L, int d) {
    for (int i = 0; i < L; ++i) {
        const double* xh = xhat + static_cast<std::size_t>(i) * d;
        const double* dyi = dy + static_cast<std::size_t>(i) * d;
        double* dxi = dx + static_cast<std::size_t>(i) * d;
        double mean_t = 0.0, mean_tx = 0.0;
        for (int j = 0; j < d; ++j) {
            const double t = g[j] * dyi[j];
            mean_t += t;
            mean_tx += t * xh[j];
            dg[j] += dyi[j] * xh[j];
            db[j] += dyi[j];
        }
        mean_t /= d;
        mean_tx /= d;
        const double rs = rstd[i];
        for (int j = 0; j < d; ++j) {
            const double t = g[j] * dyi[j];
            dxi[j] += (t - mean_t - xh[j] * mean_tx) * rs;
        }
    }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace

struct Activations {
    int L = 0;
    std::vector<double> x0;
    struct LayerCache {
        std::vector<double> ln1_xhat, ln1_rstd, a;
        std::vector<double> q, k, v, att, ctx, x_attn;
        std::vector<double> ln2_xhat, ln2_rstd, m, h1, hact, x_out;
    };
    std::vector<LayerCache> layers;
    std::vector<double> lnf_xhat, lnf_rstd, y;
};

Activations* make_activations() { return new Activations(); }
void free_activations(Activations* a) { delete a; }

namespace {

// Query rows attend everywhere; all other rows are causal.
inline int attend_limit(int i, int query_begin, int L) {
    return (query_begin >= 0 && i >= query_begin) ? L : i + 1;
}

void embed_input(const Model& model, const BuiltSequence& seq, double* x) {
    const auto& cfg = model.cfg;
    const auto& lay = model.layout;
    const double* P = model.params.data();
    const int d = cfg.d_model;
    const int n = cfg.n_cells();
    for (int i = 0; i < seq.length(); ++i) {
        const Slot& slot = seq.slots[static_cast<std::size_t>(i)];
        double* xi = x + static_cast<std::size_t>(i) * d;
        const double* pos = P + lay.pos_emb + static_cast<std::size_t>(i) * d;
        switch (slot.kind) {
            case SlotKind::Text: {
                require(slot.token >= 0 && slot.token < cfg.text_vocab, ErrorKind::InvalidToken,
                        "text token out of range");
                const double* e = P + lay.text_tok_emb + static_cast<std::size_t>(slot.token) * d;
                for (int j = 0; j < d; ++j) xi[j] = e[j] + pos[j];
                break;
            }
            case SlotKind::Spatial: {
                require(slot.token >= 0 && slot.token < cfg.codebook, ErrorKind::InvalidToken,
                        "image token out of range");
                const double* e = P + lay.codebook_emb + static_cast<std::size_t>(slot.token) * d;
                const double* gp = P + lay.grid_pos_emb + static_cast<std::size_t>(slot.cell) * d;
                for (int j = 0; j < d; ++j) xi[j] = e[j] + gp[j] + pos[j];
                break;
            }
            case SlotKind::PooledSpatial: {
                const auto& toks = seq.group_tokens[static_cast<std::size_t>(slot.group)].tokens;
                for (int j = 0; j < d; ++j) xi[j] = 0.0;
                for (int c = 0; c < n; ++c) {
                    const double* e =
                        P + lay.codebook_emb + static_cast<std::size_t>(toks[static_cast<std::size_t>(c)]) * d;
                    const double* gp = P + lay.grid_pos_emb + static_cast<std::size_t>(c) * d;
                    for (int j = 0; j < d; ++j) xi[j] += e[j] + gp[j];
                }
                for (int j = 0; j < d; ++j) xi[j] = xi[j] / n + pos[j];
                break;
            }
            case SlotKind::Semantic: {
                const auto& sem = seq.group_sem[static_cast<std::size_t>(slot.group)];
                const double* w = P + lay.sem_proj;
                for (int j = 0; j < d; ++j)
                    xi[j] = dot(w + static_cast<std::size_t>(j) * cfg.d_sem, sem.data(), cfg.d_sem) +
                            pos[j];
                break;
            }
            case SlotKind::Query: {
                const double* e = P + lay.img_query_emb + static_cast<std::size_t>(slot.cell) * d;
                for (int j = 0; j < d; ++j) xi[j] = e[j] + pos[j];
                break;
            }
        }
    }
}

void attention_forward(const Model& model, const BuiltSequence& seq, Activations::LayerCache& c,
                       const double* x_in, int L) {
    const auto& cfg = model.cfg;
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // att rows are only read on [0, jmax); ctx accumulates and must be zeroed.
    c.att.resize(static_cast<std::size_t>(H) * L * L);
    c.ctx.assign(static_cast<std::size_t>(L) * d, 0.0);
    for (int h = 0; h < H; ++h) {
        const int hoff = h * dh;
        for (int i = 0; i < L; ++i) {
            const double* qi = c.q.data() + static_cast<std::size_t>(i) * d + hoff;
            double* att_row = c.att.data() + (static_cast<std::size_t>(h) * L + i) * L;
            const int jmax = attend_limit(i, seq.query_begin, L);
            double maxv = -1e300;
            for (int j = 0; j < jmax; ++j) {
                const double s =
                    dot(qi, c.k.data() + static_cast<std::size_t>(j) * d + hoff, dh) * scale;
                att_row[j] = s;
                maxv = std::max(maxv, s);
            }
            double denom = 0.0;
            for (int j = 0; j < jmax; ++j) {
                att_row[j] = std::exp(att_row[j] - maxv);
                denom += att_row[j];
            }
            const double inv = 1.0 / denom;
            double* ctx_i = c.ctx.data() + static_cast<std::size_t>(i) * d + hoff;
            for (int j = 0; j < jmax; ++j) {
                att_row[j] *= inv;
                axpy(att_row[j], c.v.data() + static_cast<std::size_t>(j) * d + hoff, ctx_i, dh);
            }
        }
    }
    (void)x_in;
}

}  // namespace

ForwardResult forward(const Model& model, const BuiltSequence& seq, Activations* cache,
                      const std::vector<int>* extra_text_pos) {
    const auto& cfg = model.cfg;
    const auto& lay = model.layout;
    const double* P = model.params.data();
    const int L = seq.length();
    const int d = cfg.d_model;
    require(L > 0, ErrorKind::EmptyBatch, "empty sequence");
    require(L <= cfg.max_seq_len, ErrorKind::LengthExceeded,
            "sequence length " + std::to_string(L) + " exceeds max_seq_len");
    ++model.forward_calls;

    ActivationsPtr local_cache;
    Activations& act = cache ? *cache : *local_cache.p;
    act.L = L;
    act.x0.resize(static_cast<std::size_t>(L) * d);
    act.layers.resize(static_cast<std::size_t>(cfg.n_layers));

    embed_input(model, seq, act.x0.data());

    const double* x_in = act.x0.data();
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& c = act.layers[static_cast<std::size_t>(l)];
        const auto& lo = lay.layers[static_cast<std::size_t>(l)];
        const std::size_t Ld = static_cast<std::size_t>(L) * d;
        c.ln1_xhat.resize(Ld);
        c.ln1_rstd.resize(static_cast<std::size_t>(L));
        c.a.resize(Ld);
        layernorm_forward(x_in, P + lo.ln1_g, P + lo.ln1_b, c.ln1_xhat.data(), c.ln1_rstd.data(),
                          c.a.data(), L, d);
        c.q.resize(Ld);
        c.k.resize(Ld);
        c.v.resize(Ld);
        linear_forward(c.a.data(), P + lo.wq, P + lo.bq, c.q.data(), L, d, d);
        linear_forward(c.a.data(), P + lo.wk, P + lo.bk, c.k.data(), L, d, d);
        linear_forward(c.a.data(), P + lo.wv, P + lo.bv, c.v.data(), L, d, d);
        attention_forward(model, seq, c, x_in, L);
        c.x_attn.resize(Ld);
        // x_attn = x_in + Wo*ctx + bo
        linear_forward(c.ctx.data(), P + lo.wo, P + lo.bo, c.x_attn.data(), L, d, d);
        for (std::size_t i = 0; i < Ld; ++i) c.x_attn[i] += x_in[i];

        c.ln2_xhat.resize(Ld);
        c.ln2_rstd.resize(static_cast<std::size_t>(L));
        c.m.resize(Ld);
        layernorm_forward(c.x_attn.data(), P + lo.ln2_g, P + lo.ln2_b, c.ln2_xhat.data(),
                          c.ln2_rstd.data(), c.m.data(), L, d);
        const std::size_t Lf = static_cast<std::size_t>(L) * cfg.d_ff();
        c.h1.resize(Lf);
        c.hact.resize(Lf);
        linear_forward(c.m.data(), P + lo.w1, P + lo.b1, c.h1.data(), L, d, cfg.d_ff());
        for (std::size_t i = 0; i < Lf; ++i) c.hact[i] = gelu(c.h1[i]);
        c.x_out.resize(Ld);
        linear_forward(c.hact.data(), P + lo.w2, P + lo.b2, c.x_out.data(), L, cfg.d_ff(), d);
        for (std::size_t i = 0; i < Ld; ++i) c.x_out[i] += c.x_attn[i];
        x_in = c.x_out.data();
    }

    act.lnf_xhat.resize(static_cast<std::size_t>(L) * d);
    act.lnf_rstd.resize(static_cast<std::size_t>(L));
    act.y.resize(static_cast<std::size_t>(L) * d);
    layernorm_forward(x_in, P + lay.ln_f_g, P + lay.ln_f_b, act.lnf_xhat.data(),
                      act.lnf_rstd.data(), act.y.data(), L, d);

    ForwardResult out;
    out.text_pos = seq.text_pos;
    if (extra_text_pos)
        out.text_pos.insert(out.text_pos.end(), extra_text_pos->begin(), extra_text_pos->end());
    out.text_logits.assign(out.text_pos.size() * static_cast<std::size_t>(cfg.text_vocab), 0.0);
    for (std::size_t r = 0; r < out.text_pos.size(); ++r) {
        const int pos = out.text_pos[r];
        require(pos >= 0 && pos < L, ErrorKind::ShapeMismatch, "text position out of range");
        const double* yi = act.y.data() + static_cast<std::size_t>(pos) * d;
        double* row = out.text_logits.data() + r * static_cast<std::size_t>(cfg.text_vocab);
        for (int o = 0; o < cfg.text_vocab; ++o)
            row[o] = P[lay.text_head_b + static_cast<std::size_t>(o)] +
                     dot(P + lay.text_head_w + static_cast<std::size_t>(o) * d, yi, d);
    }

    out.image.n_positions = static_cast<int>(seq.image_pos.size());
    out.image.vocab = cfg.codebook;
    out.image.logits.assign(seq.image_pos.size() * static_cast<std::size_t>(cfg.codebook), 0.0);
    for (std::size_t r = 0; r < seq.image_pos.size(); ++r) {
        const int pos = seq.image_pos[r];
        const double* yi = act.y.data() + static_cast<std::size_t>(pos) * d;
        double* row = out.image.logits.data() + r * static_cast<std::size_t>(cfg.codebook);
        for (int o = 0; o < cfg.codebook; ++o)
            row[o] = P[lay.img_head_b + static_cast<std::size_t>(o)] +
                     dot(P + lay.img_head_w + static_cast<std::size_t>(o) * d, yi, d);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

void backward(const Model& model, const BuiltSequence& seq, const Activations& act,
              const ForwardResult& out, const std::vector<double>& d_text_logits,
              const std::vector<double>& d_image_logits, std::vector<double>& grad) {
    const auto& cfg = model.cfg;
    const auto& lay = model.layout;
    const double* P = model.params.data();
    const int L = act.L;
    const int d = cfg.d_model;
    require(grad.size() == model.params.size(), ErrorKind::ShapeMismatch,
            "gradient buffer size mismatch");
    require(d_text_logits.size() == out.text_logits.size() &&
                d_image_logits.size() == out.image.logits.size(),
            ErrorKind::ShapeMismatch, "logit gradient size mismatch");

    double* G = grad.data();
    std::vector<double> dy(static_cast<std::size_t>(L) * d, 0.0);

    // Heads.
    for (std::size_t r = 0; r < out.text_pos.size(); ++r) {
        const int pos = out.text_pos[r];
        const double* dl = d_text_logits.data() + r * static_cast<std::size_t>(cfg.text_vocab);
        const double* yi = act.y.data() + static_cast<std::size_t>(pos) * d;
        double* dyi = dy.data() + static_cast<std::size_t>(pos) * d;
        for (int o = 0; o < cfg.text_vocab; ++o) {
            const double g = dl[o];
            if (g == 0.0) continue;
            axpy(g, P + lay.text_head_w + static_cast<std::size_t>(o) * d, dyi, d);
            axpy(g, yi, G + lay.text_head_w + static_cast<std::size_t>(o) * d, d);
            G[lay.text_head_b + static_cast<std::size_t>(o)] += g;
        }
    }
    for (std::size_t r = 0; r < seq.image_pos.size(); ++r) {
        const int pos = seq.image_pos[r];
        const double* dl = d_image_logits.data() + r * static_cast<std::size_t>(cfg.codebook);
        const double* yi = act.y.data() + static_cast<std::size_t>(pos) * d;
        double* dyi = dy.data() + static_cast<std::size_t>(pos) * d;
        for (int o = 0; o < cfg.codebook; ++o) {
            const double g = dl[o];
            if (g == 0.0) continue;
            axpy(g, P + lay.img_head_w + static_cast<std::size_t>(o) * d, dyi, d);
            axpy(g, yi, G + lay.img_head_w + static_cast<std::size_t>(o) * d, d);
            G[lay.img_head_b + static_cast<std::size_t>(o)] += g;
        }
    }

    // Final LayerNorm.
    std::vector<double> dx(static_cast<std::size_t>(L) * d, 0.0);
    layernorm_backward(act.lnf_xhat.data(), act.lnf_rstd.data(), P + lay.ln_f_g, dy.data(),
                       dx.data(), G + lay.ln_f_g, G + lay.ln_f_b, L, d);

    const int H = cfg.n_heads;
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> dxa(static_cast<std::size_t>(L) * d);
    std::vector<double> dm(static_cast<std::size_t>(L) * d);
    std::vector<double> dh1(static_cast<std::size_t>(L) * cfg.d_ff());
    std::vector<double> dctx(static_cast<std::size_t>(L) * d);
    std::vector<double> da(static_cast<std::size_t>(L) * d);
    std::vector<double> dq(static_cast<std::size_t>(L) * d);
    std::vector<double> dk(static_cast<std::size_t>(L) * d);
    std::vector<double> dv(static_cast<std::size_t>(L) * d);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& c = act.layers[static_cast<std::size_t>(l)];
        const auto& lo = lay.layers[static_cast<std::size_t>(l)];
        const double* x_in =
            (l == 0) ? act.x0.data() : act.layers[static_cast<std::size_t>(l - 1)].x_out.data();
        (void)x_in;
        const std::size_t Ld = static_cast<std::size_t>(L) * d;
        const std::size_t Lf = static_cast<std::size_t>(L) * cfg.d_ff();

        // dx holds dL/d(x_out). MLP residual: x_out = x_attn + W2 gelu(W1 m + b1) + b2.
        std::fill(dh1.begin(), dh1.end(), 0.0);
        // dhact = dx * W2 (rows [d, ff]); accumulate dW2, db2.
        for (int i = 0; i < L; ++i) {
            const double* dxi = dx.data() + static_cast<std::size_t>(i) * d;
            const double* hact_i = c.hact.data() + static_cast<std::size_t>(i) * cfg.d_ff();
            double* dh1_i = dh1.data() + static_cast<std::size_t>(i) * cfg.d_ff();
            for (int o = 0; o < d; ++o) {
                const double g = dxi[o];
                if (g == 0.0) continue;
                axpy(g, P + lo.w2 + static_cast<std::size_t>(o) * cfg.d_ff(), dh1_i, cfg.d_ff());
                axpy(g, hact_i, G + lo.w2 + static_cast<std::size_t>(o) * cfg.d_ff(), cfg.d_ff());
                G[lo.b2 + static_cast<std::size_t>(o)] += g;
            }
        }
        for (std::size_t i = 0; i < Lf; ++i) dh1[i] *= gelu_grad(c.h1[i]);
        std::fill(dm.begin(), dm.end(), 0.0);
        linear_backward(c.m.data(), P + lo.w1, dh1.data(), dm.data(), G + lo.w1, G + lo.b1, L, d,
                        cfg.d_ff());
        // ln2 backward into dxa (plus the residual path dx itself).
        std::copy(dx.begin(), dx.end(), dxa.begin());
        layernorm_backward(c.ln2_xhat.data(), c.ln2_rstd.data(), P + lo.ln2_g, dm.data(),
                           dxa.data(), G + lo.ln2_g, G + lo.ln2_b, L, d);

        // Attention residual: x_attn = x_in + Wo ctx + bo.
        std::fill(dctx.begin(), dctx.end(), 0.0);
        linear_backward(c.ctx.data(), P + lo.wo, dxa.data(), dctx.data(), G + lo.wo, G + lo.bo, L,
                        d, d);

        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        for (int h = 0; h < H; ++h) {
            const int hoff = h * dh;
            for (int i = 0; i < L; ++i) {
                const int jmax = attend_limit(i, seq.query_begin, L);
                const double* att_row = c.att.data() + (static_cast<std::size_t>(h) * L + i) * L;
                const double* dctx_i = dctx.data() + static_cast<std::size_t>(i) * d + hoff;
                // datt_j = dot(dctx_i, v_j); dv_j += att_j * dctx_i
                double dot_sum = 0.0;
                // First pass: raw datt and the softmax dot correction.
                thread_local std::vector<double> datt;
                datt.resize(static_cast<std::size_t>(jmax));
                for (int j = 0; j < jmax; ++j) {
                    const double* vj = c.v.data() + static_cast<std::size_t>(j) * d + hoff;
                    datt[static_cast<std::size_t>(j)] = dot(dctx_i, vj, dh);
                    dot_sum += datt[static_cast<std::size_t>(j)] * att_row[j];
                    axpy(att_row[j], dctx_i, dv.data() + static_cast<std::size_t>(j) * d + hoff,
                         dh);
                }
                const double* qi = c.q.data() + static_cast<std::size_t>(i) * d + hoff;
                double* dqi = dq.data() + static_cast<std::size_t>(i) * d + hoff;
                for (int j = 0; j < jmax; ++j) {
                    const double ds = att_row[j] * (datt[static_cast<std::size_t>(j)] - dot_sum) *
                                      scale;
                    if (ds == 0.0) continue;
                    axpy(ds, c.k.data() + static_cast<std::size_t>(j) * d + hoff, dqi, dh);
                    axpy(ds, qi, dk.data() + static_cast<std::size_t>(j) * d + hoff, dh);
                }
            }
        }
        std::fill(da.begin(), da.end(), 0.0);
        linear_backward(c.a.data(), P + lo.wq, dq.data(), da.data(), G + lo.wq, G + lo.bq, L, d, d);
        linear_backward(c.a.data(), P + lo.wk, dk.data(), da.data(), G + lo.wk, G + lo.bk, L, d, d);
        linear_backward(c.a.data(), P + lo.wv, dv.data(), da.data(), G + lo.wv, G + lo.bv, L, d, d);
        // ln1 backward lands in dx for the layer below (residual: dxa flows too).
        std::copy(dxa.begin(), dxa.end(), dx.begin());
        layernorm_backward(c.ln1_xhat.data(), c.ln1_rstd.data(), P + lo.ln1_g, da.data(),
                           dx.data(), G + lo.ln1_g, G + lo.ln1_b, L, d);
        (void)Ld;
    }

    // Embedding scatter.
    const int n = cfg.n_cells();
    for (int i = 0; i < L; ++i) {
        const Slot& slot = seq.slots[static_cast<std::size_t>(i)];
        const double* dxi = dx.data() + static_cast<std::size_t>(i) * d;
        axpy(1.0, dxi, G + lay.pos_emb + static_cast<std::size_t>(i) * d, d);
        switch (slot.kind) {
            case SlotKind::Text:
                axpy(1.0, dxi, G + lay.text_tok_emb + static_cast<std::size_t>(slot.token) * d, d);
                break;
            case SlotKind::Spatial:
                axpy(1.0, dxi, G + lay.codebook_emb + static_cast<std::size_t>(slot.token) * d, d);
                axpy(1.0, dxi, G + lay.grid_pos_emb + static_cast<std::size_t>(slot.cell) * d, d);
                break;
            case SlotKind::PooledSpatial: {
                const auto& toks = seq.group_tokens[static_cast<std::size_t>(slot.group)].tokens;
                const double inv = 1.0 / n;
                for (int cidx = 0; cidx < n; ++cidx) {
                    axpy(inv, dxi,
                         G + lay.codebook_emb +
                             static_cast<std::size_t>(toks[static_cast<std::size_t>(cidx)]) * d,
                         d);
                    axpy(inv, dxi, G + lay.grid_pos_emb + static_cast<std::size_t>(cidx) * d, d);
                }
                break;
            }
            case SlotKind::Semantic: {
                const auto& sem = seq.group_sem[static_cast<std::size_t>(slot.group)];
                for (int o = 0; o < d; ++o)
                    axpy(dxi[o], sem.data(),
                         G + lay.sem_proj + static_cast<std::size_t>(o) * cfg.d_sem, cfg.d_sem);
                break;
            }
            case SlotKind::Query:
                axpy(1.0, dxi, G + lay.img_query_emb + static_cast<std::size_t>(slot.cell) * d, d);
                break;
        }
    }
}

// ---------------------------------------------------------------------------
// Sampling and decoding
// ---------------------------------------------------------------------------

namespace {

void log_softmax_row(const double* logits, int n, double* out) {
    double maxv = logits[0];
    for (int i = 1; i < n; ++i) maxv = std::max(maxv, logits[i]);
    double denom = 0.0;
    for (int i = 0; i < n; ++i) denom += std::exp(logits[i] - maxv);
    const double log_denom = std::log(denom) + maxv;
    for (int i = 0; i < n; ++i) out[i] = logits[i] - log_denom;
}

}  // namespace

std::vector<SampledImage> sample_images(const ImageDistribution& dist, int k, Rng& rng, int grid) {
    require(k >= 1, ErrorKind::BadConfig, "K must be >= 1");
    require(dist.n_positions == grid * grid, ErrorKind::ShapeMismatch,
            "distribution rows do not match grid");
    const int V = dist.vocab;
    std::vector<double> logp(static_cast<std::size_t>(dist.n_positions) * V);
    for (int r = 0; r < dist.n_positions; ++r)
        log_softmax_row(dist.row(r), V, logp.data() + static_cast<std::size_t>(r) * V);

    std::vector<SampledImage> out(static_cast<std::size_t>(k));
    for (auto& s : out) {
        s.tokens.grid = grid;
        s.tokens.tokens.resize(static_cast<std::size_t>(dist.n_positions));
        s.log_prob = 0.0;
    }
    std::vector<double> probs(static_cast<std::size_t>(V));
    for (int r = 0; r < dist.n_positions; ++r) {
        const double* lp = logp.data() + static_cast<std::size_t>(r) * V;
        for (int i = 0; i < V; ++i) probs[static_cast<std::size_t>(i)] = std::exp(lp[i]);
        for (int s = 0; s < k; ++s) {
            const int id = rng.categorical(probs);
            out[static_cast<std::size_t>(s)].tokens.tokens[static_cast<std::size_t>(r)] = id;
            out[static_cast<std::size_t>(s)].log_prob += lp[id];
        }
    }
    return out;
}

SampledImage greedy_image(const ImageDistribution& dist, int grid) {
    SampledImage s;
    s.tokens.grid = grid;
    s.tokens.tokens.resize(static_cast<std::size_t>(dist.n_positions));
    std::vector<double> lp(static_cast<std::size_t>(dist.vocab));
    for (int r = 0; r < dist.n_positions; ++r) {
        log_softmax_row(dist.row(r), dist.vocab, lp.data());
        int best = 0;
        for (int i = 1; i < dist.vocab; ++i)
            if (lp[static_cast<std::size_t>(i)] > lp[static_cast<std::size_t>(best)]) best = i;
        s.tokens.tokens[static_cast<std::size_t>(r)] = best;
        s.log_prob += lp[static_cast<std::size_t>(best)];
    }
    return s;
}

SampledImage ar_sample_image(const Model& model, const BuiltSequence& condition, Rng& rng,
                             bool greedy) {
    require(model.cfg.variant == Variant::AR, ErrorKind::BadConfig,
            "ar_sample_image requires the AR variant");
    const int n = model.cfg.n_cells();
    const Vocab vocab(model.cfg.grid);
    BuiltSequence seq = condition;
    seq.text_pos.clear();
    seq.text_target.clear();
    seq.image_pos.clear();
    seq.image_target.clear();
    SequenceBuilder::push_text_token(seq, vocab.img_open());

    SampledImage out;
    out.tokens.grid = model.cfg.grid;
    out.tokens.tokens.resize(static_cast<std::size_t>(n));
    std::vector<double> lp(static_cast<std::size_t>(model.cfg.codebook));
    std::vector<double> probs(static_cast<std::size_t>(model.cfg.codebook));
    for (int c = 0; c < n; ++c) {
        seq.image_pos.assign(1, seq.length() - 1);
        const ForwardResult r = forward(model, seq);
        log_softmax_row(r.image.row(0), model.cfg.codebook, lp.data());
        int id;
        if (greedy) {
            id = 0;
            for (int i = 1; i < model.cfg.codebook; ++i)
                if (lp[static_cast<std::size_t>(i)] > lp[static_cast<std::size_t>(id)]) id = i;
        } else {
            for (int i = 0; i < model.cfg.codebook; ++i)
                probs[static_cast<std::size_t>(i)] = std::exp(lp[static_cast<std::size_t>(i)]);
            id = rng.categorical(probs);
        }
        out.tokens.tokens[static_cast<std::size_t>(c)] = id;
        out.log_prob += lp[static_cast<std::size_t>(id)];
        if (c + 1 < n) {
            seq.image_pos.clear();
            seq.slots.push_back(Slot{SlotKind::Spatial, id, c, -1});
        }
    }
    return out;
}

DecodedAction decode_action(const Model& model, const BuiltSequence& condition, const Vocab& vocab,
                            bool greedy, Rng& rng, int max_tokens) {
    BuiltSequence seq = condition;
    seq.text_pos.clear();
    seq.text_target.clear();
    seq.image_pos.clear();
    seq.image_target.clear();

    DecodedAction out;
    std::vector<double> lp(static_cast<std::size_t>(model.cfg.text_vocab));
    std::vector<double> probs(static_cast<std::size_t>(model.cfg.text_vocab));
    for (int step = 0; step < max_tokens; ++step) {
        const std::vector<int> last{seq.length() - 1};
        const ForwardResult r = forward(model, seq, nullptr, &last);
        log_softmax_row(r.text_logits.data(), model.cfg.text_vocab, lp.data());
        int id;
        if (greedy) {
            id = 0;
            for (int i = 1; i < model.cfg.text_vocab; ++i)
                if (lp[static_cast<std::size_t>(i)] > lp[static_cast<std::size_t>(id)]) id = i;
        } else {
            for (int i = 0; i < model.cfg.text_vocab; ++i)
                probs[static_cast<std::size_t>(i)] = std::exp(lp[static_cast<std::size_t>(i)]);
            id = rng.categorical(probs);
        }
        out.tokens.push_back(id);
        if (id == vocab.eoa()) return out;
        SequenceBuilder::push_text_token(seq, id);
    }
    out.truncated = true;
    return out;
}

}  // namespace vlplan
