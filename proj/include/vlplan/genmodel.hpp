#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vlplan/gridworld.hpp"
#include "vlplan/rng.hpp"
#include "vlplan/vision.hpp"
#include "vlplan/vocab.hpp"

namespace vlplan {

// ---------------------------------------------------------------------------
// Configuration and parameters
// ---------------------------------------------------------------------------

enum class Variant : std::uint8_t { OneStep, AR };
const char* variant_name(Variant v);

struct ModelConfig {
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_sem = 32;
    int grid = 8;          // image queries N = grid*grid
    int text_vocab = 32;   // set from the Vocab in the pipeline
    int codebook = 16;     // K_img; the pipeline overrides with the full cell-code space
    int max_seq_len = 384;
    Variant variant = Variant::OneStep;
    FuseMode fuse = FuseMode::Full;

    int n_cells() const { return grid * grid; }
    int d_ff() const { return 4 * d_model; }
    int head_dim() const { return d_model / n_heads; }

    // Desk-scale defaults wired to the grid world: vocabulary and codebook
    // sized to cover every reachable token.
    static ModelConfig desk_default(int grid = 8);

    bool operator==(const ModelConfig&) const = default;
};

struct TensorSpec {
    std::string name;
    int rows = 0;
    int cols = 0;           // 0 for 1-D tensors
    std::size_t offset = 0;
    bool decay = false;     // weight decay applies (2-D weights only)

    std::size_t count() const { return static_cast<std::size_t>(rows) * (cols ? cols : 1); }
};

// Offsets of every named tensor inside the flat parameter array. Weight
// matrices are stored [out, in] so forward passes run on contiguous rows.
struct ParamLayout {
    struct Layer {
        std::size_t ln1_g, ln1_b;
        std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
        std::size_t ln2_g, ln2_b;
        std::size_t w1, b1, w2, b2;
    };

    std::size_t text_tok_emb, pos_emb, codebook_emb, grid_pos_emb, sem_proj, img_query_emb;
    std::vector<Layer> layers;
    std::size_t ln_f_g, ln_f_b;
    std::size_t text_head_w, text_head_b, img_head_w, img_head_b;
    std::size_t total = 0;
    std::vector<TensorSpec> manifest;

    static ParamLayout build(const ModelConfig& cfg);
};

struct Model {
    ModelConfig cfg;
    ParamLayout layout;
    std::vector<double> params;
    mutable std::uint64_t forward_calls = 0;  // instrumented counter
};

// Deterministic per seed; scaled normal init (sigma 0.02; residual output
// projections scaled by 1/sqrt(2*n_layers)), unit LayerNorm gains, zero biases.
Model init_model(const ModelConfig& cfg, std::uint64_t seed);

std::size_t param_count(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Sequences
// ---------------------------------------------------------------------------

enum class PromptKind : std::uint8_t { InverseDyn, ForwardDyn, Plan };

enum class SlotKind : std::uint8_t { Text, Spatial, PooledSpatial, Semantic, Query };

struct Slot {
    SlotKind kind = SlotKind::Text;
    int token = -1;  // Text: vocab id; Spatial: codebook id
    int cell = -1;   // Spatial/Query: grid cell index
    int group = -1;  // Semantic/PooledSpatial: image-group index
};

struct BuiltSequence {
    std::vector<Slot> slots;
    int query_begin = -1;  // first Query slot; queries attend bidirectionally

    // Understanding groups: token image (for pooled backward) and frozen
    // semantic vector per group.
    std::vector<TokenImage> group_tokens;
    std::vector<std::vector<double>> group_sem;

    // Supervision: text logits at text_pos[i] predict text_target[i];
    // image logits at image_pos[i] predict image_target[i].
    std::vector<int> text_pos;
    std::vector<int> text_target;
    std::vector<int> image_pos;     // filled for queries even when untargeted
    std::vector<int> image_target;  // empty when the next image is not supervised

    int length() const { return static_cast<int>(slots.size()); }
};

// Builds model input sequences from transitions. Prompt templates and slot
// layouts are fixed; see README for the exact token layout.
class SequenceBuilder {
public:
    SequenceBuilder(const ModelConfig& cfg, const Vocab& vocab);

    BuiltSequence inverse_dyn(const SymbolicState& x_t, const LanguageAction& a_t,
                              const SymbolicState& x_t1) const;
    // x_t1 present -> image supervision attached (teacher slots in AR mode).
    BuiltSequence forward_dyn(const SymbolicState& x_t, const LanguageAction& a_t,
                              const SymbolicState* x_t1) const;
    // a_t absent -> condition prefix only (for action decoding). include_image
    // controls whether the image head segment is appended (no_gen ablation).
    BuiltSequence plan(const TaskSpec& g, const SymbolicState& x_t, const LanguageAction* a_t,
                       const SymbolicState* x_t1, bool include_image = true) const;

    // Generic entry point mirroring the three cases above.
    BuiltSequence build(PromptKind kind, const TaskSpec* g, const SymbolicState* x_t,
                        const LanguageAction* a_t, const SymbolicState* x_t1) const;

    // Appends one decoded text token to a condition prefix.
    static void push_text_token(BuiltSequence& seq, int token);

    const Vocab& vocab() const { return *vocab_; }

private:
    void push_words(BuiltSequence& seq, const std::string& text) const;
    void push_image_group(BuiltSequence& seq, const SymbolicState& s) const;
    void push_action_target(BuiltSequence& seq, const LanguageAction& a) const;
    void push_image_queries(BuiltSequence& seq, const SymbolicState* target) const;

    ModelConfig cfg_;  // by value: builders outlive temporaries they were built from
    const Vocab* vocab_;
};

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct ImageDistribution {
    int n_positions = 0;
    int vocab = 0;                // K_img
    std::vector<double> logits;   // [n_positions, vocab]

    const double* row(int i) const { return logits.data() + static_cast<std::size_t>(i) * vocab; }
};

struct ForwardResult {
    // text_logits[i] is the full-vocab row for sequence position text_pos[i].
    std::vector<int> text_pos;
    std::vector<double> text_logits;  // [text_pos.size(), V]
    ImageDistribution image;          // rows align with seq.image_pos
};

// Opaque per-sequence activation cache for backward.
struct Activations;
Activations* make_activations();
void free_activations(Activations*);

struct ActivationsPtr {
    Activations* p;
    ActivationsPtr() : p(make_activations()) {}
    ~ActivationsPtr() { free_activations(p); }
    ActivationsPtr(const ActivationsPtr&) = delete;
    ActivationsPtr& operator=(const ActivationsPtr&) = delete;
};

// One instrumented forward pass. text_pos defaults to seq.text_pos; pass
// extra_text_pos to request logits at additional positions (AR decoding).
ForwardResult forward(const Model& model, const BuiltSequence& seq, Activations* cache = nullptr,
                      const std::vector<int>* extra_text_pos = nullptr);

// Accumulates parameter gradients for upstream logit gradients aligned with
// the ForwardResult produced by the same (model, seq, cache) triple.
void backward(const Model& model, const BuiltSequence& seq, const Activations& cache,
              const ForwardResult& out, const std::vector<double>& d_text_logits,
              const std::vector<double>& d_image_logits, std::vector<double>& grad);

// ---------------------------------------------------------------------------
// Sampling and decoding
// ---------------------------------------------------------------------------

struct SampledImage {
    TokenImage tokens;
    double log_prob = 0.0;  // sum of per-position log-softmax terms
};

// K independent draws from the factorized distribution; zero forward calls.
std::vector<SampledImage> sample_images(const ImageDistribution& dist, int k, Rng& rng, int grid);

// Argmax per position plus its log-probability.
SampledImage greedy_image(const ImageDistribution& dist, int grid);

// Sequential AR generation: exactly N forward calls per sample.
SampledImage ar_sample_image(const Model& model, const BuiltSequence& condition, Rng& rng,
                             bool greedy);

struct DecodedAction {
    std::vector<int> tokens;  // includes <eoa> when produced
    bool truncated = false;   // length cap reached before <eoa>
};

// Autoregressive text decoding from a plan/condition prefix.
DecodedAction decode_action(const Model& model, const BuiltSequence& condition, const Vocab& vocab,
                            bool greedy, Rng& rng, int max_tokens = 16);

}  // namespace vlplan
