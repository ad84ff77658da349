#pragma once

#include <string>
#include <vector>

#include "realcompo/conditions.hpp"
#include "realcompo/tensor.hpp"

namespace realcompo {

inline constexpr const char* kBackgroundToken = "<bg>";

// Prompt tokens with their embedding table. Index 0 is always the
// background token; content words follow in prompt order.
struct TokenSequence {
    std::vector<std::string> tokens;
    Matrix embeddings;  // N x d_k
    std::vector<int> object_token_indices;

    int size() const { return static_cast<int>(tokens.size()); }
    int dim() const { return embeddings.cols(); }
    // Token index of a word (case-insensitive, plural "s" tolerated), or -1.
    int find(const std::string& word) const;
    void validate() const;

    // Lower-cases, drops punctuation and function words. Embedding rows are
    // unit-norm Gaussian vectors seeded by a hash of the word, so the same
    // word always maps to the same row.
    static TokenSequence from_prompt(const std::string& prompt, int d_k = 8);
    static TokenSequence from_words(const std::vector<std::string>& words, int d_k = 8);
};

std::vector<std::string> tokenize_words(const std::string& text);
bool is_function_word(const std::string& w);

// Resolves each box's label to a token index. Throws when a label has no token.
void bind_tokens(Layout& layout, const TokenSequence& tokens);

// Per-pixel distribution over tokens: H x W x N, rows sum to one.
class AttnMaps {
public:
    AttnMaps() = default;
    explicit AttnMaps(Tensor3 maps) : maps_(std::move(maps)) {}
    AttnMaps(int height, int width, int tokens, double fill = 0.0) : maps_(height, width, tokens, fill) {}

    int height() const { return maps_.height(); }
    int width() const { return maps_.width(); }
    int tokens() const { return maps_.depth(); }
    std::size_t pixels() const { return maps_.pixels(); }

    double& at(int r, int c, int j) { return maps_.at(r, c, j); }
    double at(int r, int c, int j) const { return maps_.at(r, c, j); }
    double& at(std::size_t pixel, int j) { return maps_[pixel * maps_.depth() + j]; }
    double at(std::size_t pixel, int j) const { return maps_[pixel * maps_.depth() + j]; }

    // H x W slice of token j.
    Grid token_map(int j) const;
    // Largest |sum_j A_ij - 1| over pixels.
    double max_row_error() const;
    // Throws NonFiniteError / RangeError when entries leave [0,1] or rows do not sum to 1.
    void check(double tol = 1e-6) const;

    const Tensor3& tensor() const { return maps_; }
    Tensor3& tensor() { return maps_; }
    bool operator==(const AttnMaps&) const = default;

private:
    Tensor3 maps_;
};

// Q = phi * W_Q (d_f -> d_k); K = tau * W_K (d_k -> d_k).
struct AttnProjection {
    Matrix w_q;  // d_f x d_k
    Matrix w_k;  // d_k x d_k

    int d_k() const { return w_k.cols(); }
    int d_f() const { return w_q.rows(); }
    void validate() const;
    bool operator==(const AttnProjection&) const = default;
};

// softmax_j(Q_i . K_j / sqrt(d_k) + bias_ij) per pixel. `bias`, when given,
// is an H x W x N additive logit term (constant w.r.t. features).
AttnMaps compute_attention(const Tensor3& features, const TokenSequence& tokens, const AttnProjection& proj,
                           const Tensor3* bias = nullptr);

// v^T dA/dfeatures for cotangent v (H x W x N); returns H x W x d_f.
Tensor3 attention_vjp(const Tensor3& features, const TokenSequence& tokens, const AttnProjection& proj,
                      const Tensor3& cotangent, const Tensor3* bias = nullptr);

}  // namespace realcompo
