#include "realcompo/attention.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "realcompo/errors.hpp"
#include "realcompo/rng.hpp"

namespace realcompo {

namespace {

const std::set<std::string>& function_words() {
    static const std::set<std::string> words{"a",  "an",   "the", "and",  "of",   "on",   "in",   "with", "at",
                                             "to", "by",   "for", "is",   "are",  "its",  "their", "from", "under",
                                             "over", "near", "next", "beside", "behind", "left", "right", "above",
                                             "below", "one", "two", "three", "four", "some"};
    return words;
}

std::string singular(const std::string& w) {
    if (w.size() > 3 && w.back() == 's' && w[w.size() - 2] != 's') {
        return w.substr(0, w.size() - 1);
    }
    return w;
}

void embed_word(const std::string& word, Matrix& table, int row) {
    const std::uint64_t seed = fnv1a64(word.data(), word.size());
    Rng rng(seed, Stream::embeddings);
    double norm = 0.0;
    for (int k = 0; k < table.cols(); ++k) {
        table(row, k) = rng.normal();
        norm += table(row, k) * table(row, k);
    }
    norm = std::sqrt(norm);
    for (int k = 0; k < table.cols(); ++k) {
        table(row, k) /= norm;
    }
}

// Keys K = E * W_K, N x d_k.
Matrix project_keys(const TokenSequence& tokens, const AttnProjection& proj) {
    const int n  = tokens.size();
    const int dk = proj.d_k();
    Matrix keys(n, dk);
    for (int j = 0; j < n; ++j) {
        for (int b = 0; b < dk; ++b) {
            double s = 0.0;
            for (int a = 0; a < dk; ++a) {
                s += tokens.embeddings(j, a) * proj.w_k(a, b);
            }
            keys(j, b) = s;
        }
    }
    return keys;
}

void check_inputs(const Tensor3& features, const TokenSequence& tokens, const AttnProjection& proj,
                  const Tensor3* bias) {
    proj.validate();
    if (tokens.size() < 1 || tokens.dim() != proj.d_k()) {
        throw ShapeError("attention", "token embedding width " + std::to_string(tokens.dim()) +
                                          " does not match d_k " + std::to_string(proj.d_k()));
    }
    if (features.depth() != proj.d_f()) {
        throw ShapeError("attention", "feature depth " + std::to_string(features.depth()) + " does not match W_Q rows " +
                                          std::to_string(proj.d_f()));
    }
    if (bias != nullptr && bias->shape() != Shape{features.height(), features.width(), tokens.size()}) {
        throw ShapeError("attention", "logit bias shape " + bias->shape().str() + " does not match maps");
    }
}

// Softmax of one pixel's logits into `out`; returns false on non-finite logits.
bool pixel_softmax(const Tensor3& features, std::size_t i, const Matrix& keys, const AttnProjection& proj,
                   const Tensor3* bias, std::vector<double>& q, std::vector<double>& out) {
    const int df     = proj.d_f();
    const int dk     = proj.d_k();
    const int n      = keys.rows();
    const auto phi   = features.pixel(i);
    const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
    for (int b = 0; b < dk; ++b) {
        double s = 0.0;
        for (int f = 0; f < df; ++f) {
            s += phi[f] * proj.w_q(f, b);
        }
        q[b] = s;
    }
    double mx = -INFINITY;
    for (int j = 0; j < n; ++j) {
        double l = 0.0;
        for (int b = 0; b < dk; ++b) {
            l += q[b] * keys(j, b);
        }
        l *= inv;
        if (bias != nullptr) {
            l += (*bias)[i * n + j];
        }
        if (!std::isfinite(l)) {
            return false;
        }
        out[j] = l;
        mx     = std::max(mx, l);
    }
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
        out[j] = std::exp(out[j] - mx);
        z += out[j];
    }
    for (int j = 0; j < n; ++j) {
        out[j] /= z;
    }
    return true;
}

}  // namespace

std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        const auto u = static_cast<unsigned char>(ch);
        if (std::isalnum(u) || ch == '-' || ch == '_') {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) {
        words.push_back(cur);
    }
    return words;
}

bool is_function_word(const std::string& w) { return function_words().count(w) != 0; }

int TokenSequence::find(const std::string& word) const {
    const auto words = tokenize_words(word);
    if (words.size() != 1) {
        return -1;
    }
    const std::string& w = words.front();
    for (int j = 1; j < size(); ++j) {
        if (tokens[j] == w) {
            return j;
        }
    }
    for (int j = 1; j < size(); ++j) {
        if (singular(tokens[j]) == singular(w)) {
            return j;
        }
    }
    return -1;
}

void TokenSequence::validate() const {
    if (tokens.empty() || tokens.front() != kBackgroundToken) {
        throw ShapeError("attention", "token sequence must start with the background token");
    }
    if (embeddings.rows() != size() || embeddings.cols() < 1) {
        throw ShapeError("attention", "embedding table must be N x d_k");
    }
    if (!embeddings.all_finite()) {
        throw NonFiniteError("attention", "non-finite token embedding");
    }
}

TokenSequence TokenSequence::from_words(const std::vector<std::string>& words, int d_k) {
    if (d_k < 1) {
        throw ConfigError("attention", "d_k must be positive");
    }
    TokenSequence seq;
    seq.tokens.push_back(kBackgroundToken);
    for (const auto& w : words) {
        seq.tokens.push_back(w);
    }
    seq.embeddings = Matrix(seq.size(), d_k);
    for (int j = 0; j < seq.size(); ++j) {
        embed_word(seq.tokens[j], seq.embeddings, j);
        if (j > 0) {
            seq.object_token_indices.push_back(j);
        }
    }
    return seq;
}

TokenSequence TokenSequence::from_prompt(const std::string& prompt, int d_k) {
    std::vector<std::string> content;
    for (auto& w : tokenize_words(prompt)) {
        if (!is_function_word(w)) {
            content.push_back(std::move(w));
        }
    }
    return from_words(content, d_k);
}

void bind_tokens(Layout& layout, const TokenSequence& tokens) {
    for (auto& b : layout.boxes) {
        if (b.token_index >= 0 && b.label.empty()) {
            if (b.token_index >= tokens.size()) {
                throw RangeError("attention", "box token index out of range");
            }
            b.label = tokens.tokens[b.token_index];
            continue;
        }
        const int j = tokens.find(b.label);
        if (j < 0) {
            throw RangeError("attention", "layout object '" + b.label + "' does not match any prompt token");
        }
        b.token_index = j;
    }
    layout.validate(tokens.size());
}

Grid AttnMaps::token_map(int j) const {
    Grid g(height(), width());
    for (std::size_t i = 0; i < pixels(); ++i) {
        g[i] = at(i, j);
    }
    return g;
}

double AttnMaps::max_row_error() const {
    double worst = 0.0;
    for (std::size_t i = 0; i < pixels(); ++i) {
        double s = 0.0;
        for (int j = 0; j < tokens(); ++j) {
            s += at(i, j);
        }
        worst = std::max(worst, std::abs(s - 1.0));
    }
    return worst;
}

void AttnMaps::check(double tol) const {
    if (!maps_.all_finite()) {
        throw NonFiniteError("attention", "non-finite attention entry");
    }
    for (double v : maps_.data()) {
        if (v < -tol || v > 1.0 + tol) {
            throw RangeError("attention", "attention entry outside [0, 1]");
        }
    }
    if (max_row_error() > tol) {
        throw RangeError("attention", "attention rows do not sum to one");
    }
}

void AttnProjection::validate() const {
    if (w_k.rows() != w_k.cols() || w_k.rows() < 1 || w_q.cols() != w_k.rows() || w_q.rows() < 1) {
        throw ShapeError("attention", "projection must be W_Q: d_f x d_k, W_K: d_k x d_k");
    }
    if (!w_q.all_finite() || !w_k.all_finite()) {
        throw NonFiniteError("attention", "non-finite projection weights");
    }
}

AttnMaps compute_attention(const Tensor3& features, const TokenSequence& tokens, const AttnProjection& proj,
                           const Tensor3* bias) {
    check_inputs(features, tokens, proj, bias);
    const int n       = tokens.size();
    const Matrix keys = project_keys(tokens, proj);
    AttnMaps out(features.height(), features.width(), n);
    std::vector<double> q(proj.d_k()), a(n);
    for (std::size_t i = 0; i < features.pixels(); ++i) {
        if (!pixel_softmax(features, i, keys, proj, bias, q, a)) {
            throw NonFiniteError("attention", "non-finite attention logits at pixel " + std::to_string(i));
        }
        for (int j = 0; j < n; ++j) {
            out.at(i, j) = a[j];
        }
    }
    return out;
}

Tensor3 attention_vjp(const Tensor3& features, const TokenSequence& tokens, const AttnProjection& proj,
                      const Tensor3& cotangent, const Tensor3* bias) {
    check_inputs(features, tokens, proj, bias);
    const int n  = tokens.size();
    const int dk = proj.d_k();
    const int df = proj.d_f();
    if (cotangent.shape() != Shape{features.height(), features.width(), n}) {
        throw ShapeError("attention", "cotangent shape " + cotangent.shape().str() + " does not match attention maps");
    }
    const Matrix keys = project_keys(tokens, proj);
    const double inv  = 1.0 / std::sqrt(static_cast<double>(dk));
    Tensor3 grad(features.height(), features.width(), df);
    std::vector<double> q(dk), a(n), gq(dk);
    for (std::size_t i = 0; i < features.pixels(); ++i) {
        if (!pixel_softmax(features, i, keys, proj, bias, q, a)) {
            throw NonFiniteError("attention", "non-finite attention logits at pixel " + std::to_string(i));
        }
        const auto v = cotangent.pixel(i);
        double av    = 0.0;
        for (int j = 0; j < n; ++j) {
            av += a[j] * v[j];
        }
        // softmax Jacobian: dl_j = a_j (v_j - <a, v>)
        std::fill(gq.begin(), gq.end(), 0.0);
        for (int j = 0; j < n; ++j) {
            const double gl = a[j] * (v[j] - av) * inv;
            for (int b = 0; b < dk; ++b) {
                gq[b] += gl * keys(j, b);
            }
        }
        auto g = grad.pixel(i);
        for (int f = 0; f < df; ++f) {
            double s = 0.0;
            for (int b = 0; b < dk; ++b) {
                s += proj.w_q(f, b) * gq[b];
            }
            g[f] = s;
        }
    }
    return grad;
}

}  // namespace realcompo
