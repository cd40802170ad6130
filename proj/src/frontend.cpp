#include "gmtr/frontend.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace gmtr {

using nlohmann::json;

void ImageGrid::validate() const {
  if (C < 1 || H < 1 || W < 1 || P < 1) {
    throw ConfigError("image: non-positive dimensions");
  }
  if (H % P != 0 || W % P != 0) {
    throw ConfigError("image: " + std::to_string(H) + "x" + std::to_string(W) +
                      " not divisible by patch size " + std::to_string(P));
  }
  if (pix.size() != static_cast<std::size_t>(C) * H * W) {
    throw ConfigError("image: pixel buffer has " + std::to_string(pix.size()) +
                      " values, expected " + std::to_string(static_cast<std::size_t>(C) * H * W));
  }
}

int feature_dim(const FrontendConfig& cfg) {
  return cfg.dim * (cfg.cross_layers + cfg.bilinear_layers);
}

FrontendParams make_frontend_params(ParamStore& store, const FrontendConfig& cfg, int patch_len,
                                    int raw_patches, Rng& rng) {
  const int d = cfg.dim;
  FrontendParams par;
  par.embed = &store.add("frontend.embed", "frontend", init_trunc_normal(rng, d, patch_len));
  par.pos = &store.add("frontend.pos", "frontend", init_trunc_normal(rng, raw_patches + 1, d));
  par.cls = &store.add("frontend.cls", "frontend", init_trunc_normal(rng, 1, d));
  for (int b = 0; b < cfg.layers; ++b) {
    const std::string pre = "frontend.block" + std::to_string(b) + ".";
    EncoderBlockParams bp;
    bp.w_q = &store.add(pre + "w_q", "frontend", init_trunc_normal(rng, d, d));
    bp.w_k = &store.add(pre + "w_k", "frontend", init_trunc_normal(rng, d, d));
    bp.w_v = &store.add(pre + "w_v", "frontend", init_trunc_normal(rng, d, d));
    bp.w_o = &store.add(pre + "w_o", "frontend", init_trunc_normal(rng, d, d));
    bp.ln1_g = &store.add(pre + "ln1_g", "frontend", init_ones(1, d));
    bp.ln1_b = &store.add(pre + "ln1_b", "frontend", init_zeros(1, d));
    bp.ln2_g = &store.add(pre + "ln2_g", "frontend", init_ones(1, d));
    bp.ln2_b = &store.add(pre + "ln2_b", "frontend", init_zeros(1, d));
    bp.mlp_w1 = &store.add(pre + "mlp_w1", "frontend", init_trunc_normal(rng, d, cfg.mlp_ratio * d));
    bp.mlp_b1 = &store.add(pre + "mlp_b1", "frontend", init_zeros(1, cfg.mlp_ratio * d));
    bp.mlp_w2 = &store.add(pre + "mlp_w2", "frontend", init_trunc_normal(rng, cfg.mlp_ratio * d, d));
    bp.mlp_b2 = &store.add(pre + "mlp_b2", "frontend", init_zeros(1, d));
    par.blocks.push_back(bp);
  }
  return par;
}

std::pair<int, int> crop_origin(const ImageGrid& img, const Keypoint& kp) {
  auto clamp = [](long v, long lo, long hi) { return std::max(lo, std::min(hi, v)); };
  const long x0 = clamp(std::lround(kp.u - img.P / 2.0), 0, img.W - img.P);
  const long y0 = clamp(std::lround(kp.v - img.P / 2.0), 0, img.H - img.P);
  return {static_cast<int>(x0), static_cast<int>(y0)};
}

Mat raw_patch_matrix(const ImageGrid& img) {
  img.validate();
  const int P = img.P, gw = img.grid_w(), gh = img.grid_h();
  Mat out(img.raw_patches(), img.C * P * P);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      const int row = gy * gw + gx;
      for (int c = 0; c < img.C; ++c) {
        for (int dy = 0; dy < P; ++dy) {
          for (int dx = 0; dx < P; ++dx) {
            out(row, (c * P + dy) * P + dx) = img.at(c, gy * P + dy, gx * P + dx);
          }
        }
      }
    }
  }
  return out;
}

Mat crop_key_patches(const ImageGrid& img, const KeypointSet& kps) {
  img.validate();
  const int P = img.P;
  Mat out(static_cast<Eigen::Index>(kps.size()), img.C * P * P);
  for (std::size_t q = 0; q < kps.size(); ++q) {
    const auto [x0, y0] = crop_origin(img, kps[q]);
    for (int c = 0; c < img.C; ++c) {
      for (int dy = 0; dy < P; ++dy) {
        for (int dx = 0; dx < P; ++dx) {
          out(static_cast<Eigen::Index>(q), (c * P + dy) * P + dx) =
              img.at(c, y0 + dy, x0 + dx);
        }
      }
    }
  }
  return out;
}

FilterMask build_filter_mask(const ImageGrid& img, const KeypointSet& kps, bool cls_visible) {
  img.validate();
  const int P = img.P, gw = img.grid_w(), gh = img.grid_h();
  FilterMask mask;
  mask.m = Mat::Zero(static_cast<Eigen::Index>(kps.size()), 1 + img.raw_patches());
  for (std::size_t q = 0; q < kps.size(); ++q) {
    if (cls_visible) mask.m(static_cast<Eigen::Index>(q), 0) = 1.0;
    const auto [x0, y0] = crop_origin(img, kps[q]);
    const int gx0 = x0 / P, gy0 = y0 / P;
    const int gx1 = std::min(gx0 + (x0 % P != 0 ? 1 : 0), gw - 1);
    const int gy1 = std::min(gy0 + (y0 % P != 0 ? 1 : 0), gh - 1);
    for (int gy = gy0; gy <= gy1; ++gy) {
      for (int gx = gx0; gx <= gx1; ++gx) {
        mask.m(static_cast<Eigen::Index>(q), 1 + gy * gw + gx) = 1.0;
      }
    }
  }
  return mask;
}

ad::Var embed_raw_patches(Graph& g, const ImageGrid& img, const FrontendParams& par,
                          bool positional) {
  const int n = img.raw_patches();
  const int d = static_cast<int>(par.embed->value.rows());
  ad::Var patches = g.constant(raw_patch_matrix(img));
  ad::Var proj = ad::matmul(patches, ad::transpose(g.use(*par.embed)));  // N x D
  ad::Var cls_tok = g.use(*par.cls);
  if (positional) {
    ad::Var pos = g.use(*par.pos);
    cls_tok = cls_tok + ad::block(pos, 0, 0, 1, d);
    proj = proj + ad::block(pos, 1, 0, n, d);
  }
  return ad::concat_rows(cls_tok, proj);
}

ad::Var embed_key_patches(Graph& g, const ImageGrid& img, const KeypointSet& kps,
                          const FrontendParams& par) {
  ad::Var crops = g.constant(crop_key_patches(img, kps));
  return ad::matmul(crops, ad::transpose(g.use(*par.embed)));
}

namespace {

ad::Var mlp_forward(Graph& g, ad::Var x, const EncoderBlockParams& b) {
  const int m = static_cast<int>(x.rows());
  ad::Var h = ad::matmul(x, g.use(*b.mlp_w1)) + ad::rep_rows(g.use(*b.mlp_b1), m);
  h = ad::gelu(h);
  return ad::matmul(h, g.use(*b.mlp_w2)) + ad::rep_rows(g.use(*b.mlp_b2), m);
}

}  // namespace

EncoderTrace encoder_forward(Graph& g, ad::Var cls_raw, std::optional<ad::Var> key,
                             const Mat& mask, const FrontendParams& par,
                             const FrontendConfig& cfg) {
  EncoderTrace trace;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  ad::Var z = cls_raw;
  std::optional<ad::Var> zq = key;
  if (zq && (mask.rows() != zq->rows() || mask.cols() != z.rows())) {
    throw std::invalid_argument("encoder_forward: mask is " + shape_str(mask) + ", expected " +
                                std::to_string(zq->rows()) + "x" + std::to_string(z.rows()));
  }
  for (const EncoderBlockParams& b : par.blocks) {
    ad::Var ln1_g = g.use(*b.ln1_g), ln1_b = g.use(*b.ln1_b);
    ad::Var wq = g.use(*b.w_q), wk = g.use(*b.w_k), wv = g.use(*b.w_v), wo = g.use(*b.w_o);

    // Self-attention over CLS+raw only.
    ad::Var a = ad::layer_norm_rows(z, ln1_g, ln1_b);
    ad::Var q = ad::matmul(a, wq);
    ad::Var k = ad::matmul(a, wk);
    ad::Var v = ad::matmul(a, wv);
    ad::Var attn = ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_d));
    ad::Var z1 = z + ad::matmul(ad::matmul(attn, v), wo);

    // Cross-attention: key-token queries against the updated CLS+raw
    // stream of this same block, logits masked by the filter.
    std::optional<ad::Var> zq1;
    if (zq) {
      ad::Var qk = ad::matmul(ad::layer_norm_rows(*zq, ln1_g, ln1_b), wq);
      ad::Var a1 = ad::layer_norm_rows(z1, ln1_g, ln1_b);
      ad::Var kk = ad::matmul(a1, wk);
      ad::Var vv = ad::matmul(a1, wv);
      ad::Var logits = ad::scale(ad::matmul(qk, ad::transpose(kk)), inv_sqrt_d);
      ad::Var cattn = ad::softmax_rows(logits, mask);
      trace.cross_attn.push_back(cattn);
      zq1 = *zq + ad::matmul(ad::matmul(cattn, vv), wo);
    }

    // Shared MLP on both streams.
    ad::Var ln2_g = g.use(*b.ln2_g), ln2_b = g.use(*b.ln2_b);
    z = z1 + mlp_forward(g, ad::layer_norm_rows(z1, ln2_g, ln2_b), b);
    trace.raw.push_back(z);
    if (zq1) {
      zq = *zq1 + mlp_forward(g, ad::layer_norm_rows(*zq1, ln2_g, ln2_b), b);
      trace.key.push_back(*zq);
    }
  }
  return trace;
}

ad::Var bilinear_sample(Graph& g, ad::Var raw_tokens, const ImageGrid& img,
                        const KeypointSet& kps) {
  const int gw = img.grid_w(), gh = img.grid_h();
  if (raw_tokens.rows() != img.raw_patches()) {
    throw std::invalid_argument("bilinear_sample: got " + std::to_string(raw_tokens.rows()) +
                                " tokens for a " + std::to_string(gh) + "x" + std::to_string(gw) +
                                " grid");
  }
  const int d = static_cast<int>(raw_tokens.cols());
  const int q = static_cast<int>(kps.size());
  std::vector<int> tl(q), tr(q), bl(q), br(q);
  Mat wtl(q, 1), wtr(q, 1), wbl(q, 1), wbr(q, 1);
  for (int i = 0; i < q; ++i) {
    const double gxf = std::clamp(kps[i].u / img.P - 0.5, 0.0, static_cast<double>(gw - 1));
    const double gyf = std::clamp(kps[i].v / img.P - 0.5, 0.0, static_cast<double>(gh - 1));
    const int x0 = std::min(static_cast<int>(std::floor(gxf)), std::max(gw - 2, 0));
    const int y0 = std::min(static_cast<int>(std::floor(gyf)), std::max(gh - 2, 0));
    const int x1 = std::min(x0 + 1, gw - 1);
    const int y1 = std::min(y0 + 1, gh - 1);
    const double wx = gxf - x0;
    const double wy = gyf - y0;
    tl[i] = y0 * gw + x0;
    tr[i] = y0 * gw + x1;
    bl[i] = y1 * gw + x0;
    br[i] = y1 * gw + x1;
    wtl(i, 0) = (1.0 - wx) * (1.0 - wy);
    wtr(i, 0) = wx * (1.0 - wy);
    wbl(i, 0) = (1.0 - wx) * wy;
    wbr(i, 0) = wx * wy;
  }
  auto corner = [&](const std::vector<int>& idx, Mat w) {
    return ad::cmul(ad::rep_cols(g.constant(std::move(w)), d), ad::select_rows(raw_tokens, idx));
  };
  return corner(tl, wtl) + corner(tr, wtr) + corner(bl, wbl) + corner(br, wbr);
}

ad::Var extract_features(Graph& g, const ImageGrid& img, const KeypointSet& kps,
                         const FrontendParams& par, const FrontendConfig& cfg) {
  if (kps.empty()) throw std::invalid_argument("extract_features: empty keypoint set");
  if (cfg.cross_layers + cfg.bilinear_layers < 1 || cfg.cross_layers > cfg.layers ||
      cfg.bilinear_layers > cfg.layers) {
    throw ConfigError("extract_features: bad cross/bilinear layer counts");
  }
  for (const Keypoint& kp : kps) {
    if (kp.u < 0.0 || kp.u >= img.W || kp.v < 0.0 || kp.v >= img.H) {
      throw std::invalid_argument("extract_features: keypoint outside image bounds");
    }
  }

  ad::Var cls_raw = embed_raw_patches(g, img, par, cfg.positional);
  std::optional<ad::Var> key;
  Mat mask;
  if (cfg.cross_layers > 0) {
    key = embed_key_patches(g, img, kps, par);
    mask = cfg.filter ? build_filter_mask(img, kps, cfg.cls_visible).m
                      : Mat::Ones(static_cast<Eigen::Index>(kps.size()), 1 + img.raw_patches());
  }
  EncoderTrace trace = encoder_forward(g, cls_raw, key, mask, par, cfg);

  std::optional<ad::Var> out;
  auto append = [&](ad::Var part) { out = out ? ad::concat_cols(*out, part) : part; };
  for (int k = 0; k < cfg.cross_layers; ++k) {
    append(trace.key[trace.key.size() - 1 - static_cast<std::size_t>(k)]);
  }
  const int n = img.raw_patches();
  for (int k = 0; k < cfg.bilinear_layers; ++k) {
    ad::Var layer = trace.raw[trace.raw.size() - 1 - static_cast<std::size_t>(k)];
    append(bilinear_sample(g, ad::block(layer, 1, 0, n, cfg.dim), img, kps));
  }
  return *out;
}

void save_image(const std::string& bin_path, const std::string& json_path, const ImageGrid& img) {
  img.validate();
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("save_image: cannot open " + bin_path);
  bin.write(reinterpret_cast<const char*>(img.pix.data()),
            static_cast<std::streamsize>(img.pix.size() * sizeof(double)));
  json desc = {{"C", img.C},
               {"H", img.H},
               {"W", img.W},
               {"patch_size", img.P},
               {"data", std::filesystem::path(bin_path).filename().string()}};
  std::ofstream js(json_path);
  if (!js) throw std::runtime_error("save_image: cannot open " + json_path);
  js << desc.dump(2) << "\n";
}

ImageGrid load_image(const std::string& json_path) {
  std::ifstream js(json_path);
  if (!js) throw std::runtime_error("load_image: cannot open " + json_path);
  json desc = json::parse(js);
  ImageGrid img;
  img.C = desc.at("C").get<int>();
  img.H = desc.at("H").get<int>();
  img.W = desc.at("W").get<int>();
  img.P = desc.at("patch_size").get<int>();
  const std::string bin_name = desc.at("data").get<std::string>();
  const std::string bin_path = (std::filesystem::path(json_path).parent_path() / bin_name).string();
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("load_image: cannot open " + bin_path);
  img.pix.resize(static_cast<std::size_t>(img.C) * img.H * img.W);
  bin.read(reinterpret_cast<char*>(img.pix.data()),
           static_cast<std::streamsize>(img.pix.size() * sizeof(double)));
  if (!bin) throw std::runtime_error("load_image: truncated pixel data in " + bin_path);
  img.validate();
  return img;
}

}  // namespace gmtr
