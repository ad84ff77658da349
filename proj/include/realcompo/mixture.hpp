#pragma once

#include <array>
#include <string>
#include <vector>

#include "realcompo/attention.hpp"
#include "realcompo/conditions.hpp"
#include "realcompo/schedule.hpp"
#include "realcompo/tensor.hpp"

namespace realcompo {

struct MixtureObject {
    std::string name;
    std::vector<double> color;  // length C
};

struct MixtureComponent {
    double weight = 0.0;
    Latent mean;
    // Per object (same order as MixtureSpec::objects): raw intensity
    // profile with peak <= 1, and the anchor (x, y) it was placed at.
    std::vector<Grid> blobs;
    std::vector<std::array<double, 2>> anchors;
    // Attention profile P_{k,j} = blob_j / max(1, sum_j' blob_j'), derived by finalize().
    std::vector<Grid> profiles;
};

// Finite delta mixture over H x W x C images. Every component places every
// object exactly once.
struct MixtureSpec {
    Shape shape;
    std::vector<MixtureObject> objects;
    std::vector<MixtureComponent> components;

    int dim() const { return static_cast<int>(shape.size()); }
    void validate() const;
    // Recomputes attention profiles from blobs.
    void finalize();
};

struct BlobworldParams {
    int height         = 16;
    int width          = 16;
    int channels       = 3;
    double blob_radius = 2.5;  // cells; the Gaussian sigma is radius / 2
    int anchor_grid    = 4;
};

inline constexpr int kMaxBlobworldObjects = 2;

// Base color for a blobworld object name (one-hot over 3 channels for the
// built-in vocabulary, hash-assigned otherwise).
std::vector<double> blobworld_color(const std::string& name, int channels);
// True for nouns of the built-in blobworld vocabulary (plurals accepted).
bool is_blobworld_noun(const std::string& word);

Grid render_blob(int height, int width, double anchor_x, double anchor_y, double sigma_cells);

// All placements of the objects at distinct anchors, equal weights.
MixtureSpec make_blobworld(const std::vector<std::string>& objects, const BlobworldParams& params = {});

struct Restriction {
    MixtureSpec spec;
    std::vector<std::string> warnings;
};

// Components whose every boxed object's anchor lies inside its box; objects
// with no anchor inside their box fall back to their nearest anchor (with a
// warning). With `confine`, each boxed object's blob is multiplied by its
// box mask and the mean re-rendered. Weights are renormalized.
Restriction restrict_to_layout(const MixtureSpec& text, const Layout& layout, bool confine);

// r_k(z) under the forward marginal at noise level alpha_bar (log-sum-exp).
std::vector<double> responsibilities(const Latent& z, double alpha_bar, const MixtureSpec& spec);

Latent analytic_eps(const Latent& z, double alpha_bar, const MixtureSpec& spec);
Latent analytic_eps(const Latent& z, int t, const MixtureSpec& spec, const NoiseSchedule& sched);

// Object token j gets sum_k r_k P_{k,j}; the background token gets the rest.
AttnMaps analytic_attention(const Latent& z, double alpha_bar, const MixtureSpec& spec, const TokenSequence& tokens);
// v^T dA/dz for the maps above.
Latent analytic_attention_vjp(const Latent& z, double alpha_bar, const MixtureSpec& spec,
                              const TokenSequence& tokens, const Tensor3& cotangent);

// log p_t(z) of the forward marginal sum_k w_k N(sqrt(abar) mu_k, (1-abar) I).
double mixture_log_density(const Latent& z, double alpha_bar, const MixtureSpec& spec);
// log sum_k w_k N(x; mu_k, h^2 I).
double smoothed_log_likelihood(const Latent& x, const MixtureSpec& spec, double bandwidth);

// Exact eps for Gaussian data N(mean, variance * I).
Latent gaussian_eps(const Latent& z, double alpha_bar, const Latent& mean, double variance);

}  // namespace realcompo
