#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "personalize/archive.hpp"
#include "personalize/autodiff.hpp"
#include "personalize/dataset.hpp"
#include "personalize/tensor.hpp"

namespace personalize {

inline constexpr const char* kSubjectToken = "<v*>";
inline constexpr const char* kAttractorToken = "<A*>";

enum class Method { kTI, kNeTI };
std::string method_name(Method m);
Method method_from_name(const std::string& s);  // UsageError on anything else

// Lowercased words with surrounding punctuation stripped; the pseudo-token
// markers <v*> and <A*> pass through verbatim.
std::vector<std::string> tokenize_prompt(const std::string& prompt);

// Frozen text encoder. encode() contextualizes a pre-encoder (n,d) sequence;
// it introduces only tape constants, so gradients flow through it into the
// injected pseudo-token rows but never into encoder weights.
class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual int dim() const = 0;
    virtual int context_length() const = 0;
    virtual bool knows(const std::string& word) const = 0;
    virtual Tensor word_embedding(const std::string& word) const = 0;
    virtual ad::Var encode(ad::Tape& tape, ad::Var sequence) const = 0;
};

// Deterministic toy encoder: hash-seeded word embeddings, sinusoidal
// positions, one frozen self-attention + MLP block. Unknown words map to the
// <unk> embedding.
class ToyTextEncoder final : public TextEncoder {
public:
    explicit ToyTextEncoder(int d = 16, uint64_t seed = 1234, int context_length = 32);

    int dim() const override { return d_; }
    int context_length() const override { return context_length_; }
    bool knows(const std::string& word) const override;
    Tensor word_embedding(const std::string& word) const override;
    ad::Var encode(ad::Tape& tape, ad::Var sequence) const override;

private:
    int d_;
    int context_length_;
    uint64_t seed_;
    Tensor wq_, wk_, wv_, wo_, w1_, w2_;
};

// Pass-through encoder for tests: the output sequence equals its input, so
// extracted contextual vectors coincide with the injected embeddings.
class IdentityTextEncoder final : public TextEncoder {
public:
    explicit IdentityTextEncoder(int d, uint64_t seed = 99, int context_length = 64)
        : d_(d), context_length_(context_length), seed_(seed) {}

    int dim() const override { return d_; }
    int context_length() const override { return context_length_; }
    bool knows(const std::string&) const override { return true; }
    Tensor word_embedding(const std::string& word) const override;
    ad::Var encode(ad::Tape&, ad::Var sequence) const override { return sequence; }

private:
    int d_;
    int context_length_;
    uint64_t seed_;
};

// Learnable embeddings: one subject token v* plus one attractor A*_k per
// training image, keyed by the image's manifest path.
struct TokenTable {
    int d = 0;
    std::string subject_id;
    Tensor subject_embedding;  // (d)
    std::vector<std::pair<std::string, Tensor>> attractor_embeddings;

    const Tensor& attractor(const std::string& image_id) const;  // UnknownTokenError
    Tensor* find_attractor(const std::string& image_id);
    bool all_finite() const;
};

enum class TokenInit { kSupercategoryWord, kRandom };

TokenTable register_tokens(const SubjectRecord& subject, int d, TokenInit init,
                           const TextEncoder& encoder, uint64_t seed);

// M_theta(t, l): a two-layer MLP over a fixed sinusoidal/one-hot encoding of
// the timestep and layer index.
struct NeTIEmbedder {
    int d = 0;
    int T = 0;       // valid timesteps are [0, T)
    int L = 0;       // denoiser cross-attention layers
    int hidden = 0;
    Tensor w1, b1, w2, b2;  // (hidden,in), (hidden), (d,hidden), (d)

    int input_dim() const;
    Tensor encode_input(int t, int l) const;  // IndexError out of range

    static NeTIEmbedder init(int d, int T, int L, int hidden, uint64_t seed);
    // M_theta ≡ v for every (t,l): zero weights, b2 = v.
    static NeTIEmbedder constant(int d, int T, int L, const Tensor& v);
};

struct NeTIParamVars {
    ad::Var w1, b1, w2, b2;
};

ad::Var neti_forward(ad::Tape& tape, const NeTIEmbedder& spec, const NeTIParamVars& params,
                     int t, int l);
Tensor neti_forward(const NeTIEmbedder& embedder, int t, int l);

// Contextualized prompt: one sequence for TI, L sequences (one per denoiser
// layer) for NeTI. token_positions maps each pseudo-token to its slot.
struct ConditioningBundle {
    Method method = Method::kTI;
    int n = 0;
    int d = 0;
    std::vector<ad::Var> sequences;
    std::map<std::string, int> token_positions;
};

// Embedding context: encoder + token table, with optional learnable-Var
// overrides. When an override Var is valid the graph uses it (and gradients
// reach it); otherwise the stored tensor enters as a constant.
struct PromptEmbedder {
    const TextEncoder* encoder = nullptr;
    const TokenTable* table = nullptr;
    Method method = Method::kTI;
    const NeTIEmbedder* neti = nullptr;  // required when method == kNeTI

    ad::Var subject_var;
    std::map<std::string, ad::Var> attractor_vars;
    NeTIParamVars neti_vars;
};

ConditioningBundle embed_prompt(ad::Tape& tape, const PromptEmbedder& pe,
                                const std::string& prompt, int t = 0,
                                const std::string& image_id = "");

// Row of the contextualized sequence at the pseudo-token's position. layer is
// ignored on the TI path.
ad::Var extract_contextual(const ConditioningBundle& bundle, const std::string& token,
                           int layer = 0);

// Learned-token checkpoint payload.
Archive make_token_archive(const TokenTable& table, Method method,
                           const NeTIEmbedder* neti = nullptr);
struct LoadedTokens {
    TokenTable table;
    Method method = Method::kTI;
    bool has_neti = false;
    NeTIEmbedder neti;
};
LoadedTokens load_token_archive(const Archive& archive);

}  // namespace personalize
