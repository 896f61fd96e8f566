#pragma once

#include <string>
#include <vector>

#include "vox2bev/geom.hpp"
#include "vox2bev/params.hpp"
#include "vox2bev/tensor.hpp"

namespace vox2bev {

struct EmbeddedSearch {
  Tensor coords;  // [M,3]
  Tensor F;       // [M,C]
};

inline void embed_init(ParamStore& ps, int64_t c, Rng& rng) {
  mlp_init(ps, "embed.corr", c, {c, c}, rng);
  mlp_init(ps, "embed.glob", c, {c, c}, rng);
  mlp_init(ps, "embed.loc", 2 * c + 4, {c, c}, rng);
  mlp_init(ps, "embed.fuse", 2 * c, {c, c}, rng);
}

// Global branch: a correlation weight per (template, search) pair from the
// feature difference, an elementwise product with the template feature, a
// max over the template axis, and a final MLP.
inline Tensor global_embed(Tape& tape, ParamStore& ps, const Tensor& p, const Tensor& q) {
  if (p.rank() != 2 || q.rank() != 2 || p.dim(1) != q.dim(1)) throw std::invalid_argument("global_embed: feature width mismatch");
  const int64_t n = p.dim(0), m = q.dim(0), c = p.dim(1);
  if (n < 1) throw std::invalid_argument("global_embed: empty template");
  Tensor p_rep = repeat_interleave_rows(tape, p, m);                      // row i*m+j = p_i
  Tensor q_rep = tile_rows(tape, q, n);                                   // row i*m+j = q_j
  Tensor w = mlp_apply(tape, ps, "embed.corr", sub(tape, p_rep, q_rep), 2);
  Tensor weighted = mul(tape, p_rep, w);                                  // p_i ∘ w_ij
  Tensor maxed = reduce_max(tape, reshape(tape, weighted, Shape{n, m, c}), 0);  // max over template axis
  return mlp_apply(tape, ps, "embed.glob", maxed, 2);
}

// Local branch: cosine-similarity match of each search feature against the
// template; the best-matching template feature, its similarity, and its 3D
// coordinate are concatenated onto the search feature.
inline Tensor local_embed(Tape& tape, ParamStore& ps, const Tensor& p, const Tensor& template_coords, const Tensor& q) {
  if (p.rank() != 2 || q.rank() != 2 || p.dim(1) != q.dim(1)) throw std::invalid_argument("local_embed: feature width mismatch");
  if (template_coords.rank() != 2 || template_coords.dim(0) != p.dim(0) || template_coords.dim(1) != 3)
    throw std::invalid_argument("local_embed: template coords not row-aligned");
  const int64_t m = q.dim(0);
  Tensor pn = rownormalize(tape, p);
  Tensor qn = rownormalize(tape, q);
  Tensor sim = matmul_nt(tape, qn, pn);  // [M,N], s_jk = cos(q_j, p_k)
  std::vector<int64_t> match;
  Tensor best = reduce_max(tape, sim, 1, &match);  // ties -> smallest template index
  Tensor best_col = reshape(tape, best, Shape{m, 1});
  Tensor p_match = take_rows(tape, p, match);
  Tensor x_match = take_rows(tape, template_coords, match);
  Tensor cat = concat_cols(tape, {&q, &best_col, &p_match, &x_match});
  return mlp_apply(tape, ps, "embed.loc", cat, 2);
}

inline Tensor fuse(Tape& tape, ParamStore& ps, const Tensor& q_glob, const Tensor& q_loc) {
  detail::check_same_shape(q_glob, q_loc, "fuse");
  Tensor cat = concat_cols(tape, {&q_glob, &q_loc});
  return mlp_apply(tape, ps, "embed.fuse", cat, 2);
}

// Full embedding: enhanced per-point search features F.
inline EmbeddedSearch embed_search(Tape& tape, ParamStore& ps, const PointCloud& tmpl_enc, const PointCloud& search_enc) {
  Tensor q_glob = global_embed(tape, ps, tmpl_enc.feats, search_enc.feats);
  Tensor q_loc = local_embed(tape, ps, tmpl_enc.feats, tmpl_enc.coords, search_enc.feats);
  return EmbeddedSearch{search_enc.coords, fuse(tape, ps, q_glob, q_loc)};
}

}  // namespace vox2bev
