#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gmtr/params.hpp"

namespace gmtr {

struct ImageGrid {
  int C = 1, H = 0, W = 0, P = 16;
  std::vector<double> pix;  // index (c * H + y) * W + x, values in [0, 1]

  double at(int c, int y, int x) const { return pix[(static_cast<std::size_t>(c) * H + y) * W + x]; }
  double& at(int c, int y, int x) { return pix[(static_cast<std::size_t>(c) * H + y) * W + x]; }
  int grid_h() const { return H / P; }
  int grid_w() const { return W / P; }
  int raw_patches() const { return grid_h() * grid_w(); }
  void validate() const;  // dims divisible by P, buffer sized H*W*C
};

struct Keypoint {
  double u = 0.0;  // x, in [0, W)
  double v = 0.0;  // y, in [0, H)
};
using KeypointSet = std::vector<Keypoint>;

// Binary Q x (1 + N) mask; column 0 is the CLS token, the rest raw
// patches in row-major grid order. Row support over raw columns is the
// set of grid cells the keypoint's crop overlaps with positive area.
struct FilterMask {
  Mat m;
};

struct FrontendConfig {
  int dim = 32;
  int layers = 2;
  int mlp_ratio = 4;
  bool positional = true;
  bool filter = true;
  bool cls_visible = true;  // key tokens may attend to CLS
  int cross_layers = 1;     // trailing layers feeding the cross-attention features
  int bilinear_layers = 1;  // trailing layers feeding the bilinear features
};

int feature_dim(const FrontendConfig& cfg);

struct EncoderBlockParams {
  Param *w_q, *w_k, *w_v, *w_o;
  Param *ln1_g, *ln1_b, *ln2_g, *ln2_b;
  Param *mlp_w1, *mlp_b1, *mlp_w2, *mlp_b2;
};

struct FrontendParams {
  Param* embed = nullptr;  // D x (C P^2)
  Param* pos = nullptr;    // (N + 1) x D; row 0 is CLS
  Param* cls = nullptr;    // 1 x D
  std::vector<EncoderBlockParams> blocks;
};

// patch_len is the flattened crop length C * P * P.
FrontendParams make_frontend_params(ParamStore& store, const FrontendConfig& cfg, int patch_len,
                                    int raw_patches, Rng& rng);

// Crop window origin: the P x P pixel box nearest to being centered on
// the keypoint, translated to lie fully inside the image.
std::pair<int, int> crop_origin(const ImageGrid& img, const Keypoint& kp);

Mat raw_patch_matrix(const ImageGrid& img);                            // N x (C P^2)
Mat crop_key_patches(const ImageGrid& img, const KeypointSet& kps);    // Q x (C P^2)
FilterMask build_filter_mask(const ImageGrid& img, const KeypointSet& kps, bool cls_visible);

ad::Var embed_raw_patches(Graph& g, const ImageGrid& img, const FrontendParams& par,
                          bool positional);  // (1 + N) x D, CLS first
ad::Var embed_key_patches(Graph& g, const ImageGrid& img, const KeypointSet& kps,
                          const FrontendParams& par);  // Q x D, no positional term

struct EncoderTrace {
  std::vector<ad::Var> raw;         // per block, (1 + N) x D
  std::vector<ad::Var> key;         // per block, Q x D (empty when no key tokens)
  std::vector<ad::Var> cross_attn;  // per block, Q x (1 + N) attention weights
};

// Per block: full self-attention over CLS+raw only, then masked
// cross-attention updating the key tokens against the post-self-attention
// CLS+raw stream, then a shared MLP on both streams (pre-norm residual
// blocks throughout). Key tokens never act as keys or values for the
// CLS+raw path.
EncoderTrace encoder_forward(Graph& g, ad::Var cls_raw, std::optional<ad::Var> key,
                             const Mat& mask, const FrontendParams& par,
                             const FrontendConfig& cfg);

// Interpolates the 4 raw tokens around each keypoint on the patch-center
// lattice; coordinates beyond the lattice are clamped to the border.
ad::Var bilinear_sample(Graph& g, ad::Var raw_tokens, const ImageGrid& img,
                        const KeypointSet& kps);  // Q x D

// Final per-keypoint features: cross-attention tokens from the last
// cross_layers blocks (most recent first), then bilinear samples from the
// last bilinear_layers blocks. Q x feature_dim(cfg).
ad::Var extract_features(Graph& g, const ImageGrid& img, const KeypointSet& kps,
                         const FrontendParams& par, const FrontendConfig& cfg);

// Raw row-major f64 image file + JSON sidecar {C, H, W, patch_size}.
void save_image(const std::string& bin_path, const std::string& json_path, const ImageGrid& img);
ImageGrid load_image(const std::string& json_path);

}  // namespace gmtr
