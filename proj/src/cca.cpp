#include "dcct/cca.hpp"

#include "dcct/errors.hpp"
#include "dcct/ops.hpp"

namespace dcct {

namespace {

CcaBranch make_branch(ParameterStore& store, const std::string& name, int own, int other, const ModelConfig& config,
                      std::mt19937_64& rng) {
  CcaBranch b;
  b.channels = own;
  b.self_head.query_proj = Linear::create(store, name + ".self.theta", own, config.cca_dim, false, rng);
  b.self_head.key_proj = Linear::create(store, name + ".self.phi", own, config.cca_dim, false, rng);
  b.cross_head.query_proj = Linear::create(store, name + ".cross.theta", other, config.cca_dim, false, rng);
  b.cross_head.key_proj = Linear::create(store, name + ".cross.phi", own, config.cca_dim, false, rng);
  b.value_self = Linear::create(store, name + ".eta_self", own, own / 2, false, rng);
  b.value_cross = Linear::create(store, name + ".eta_cross", own, own / 2, false, rng);
  b.fuse = Linear::create(store, name + ".psi", own, own, true, rng);
  b.fuse_norm = LayerNorm::create(store, name + ".psi_norm", own);
  b.fuse_activation = config.psi_activation;
  return b;
}

Var uniform_weights(int count, int positions) {
  return ops::constant(Tensor({count, positions}, 1.0 / positions));
}

Var vector_row(const std::vector<double>& v) {
  return ops::constant(Tensor({1, static_cast<int>(v.size())}, v));
}

}  // namespace

Var cca_attention_weights(const Var& local, const Var& query, const CcaHead& head, int positions) {
  Var keys = head.key_proj(local);
  Var q = head.query_proj(query);
  if (keys.cols() != q.cols()) {
    throw ShapeError("CCA attention: projected query width " + std::to_string(q.cols()) + " vs key width " +
                     std::to_string(keys.cols()));
  }
  return ops::softmax_rows(ops::group_rowdot(keys, q, positions));
}

Var cca_attend_and_fuse(const Var& local, const Var& a_self, const Var& a_cross, const Var& global_same,
                        const CcaBranch& branch, int positions) {
  Var attended_self = ops::group_weighted_sum(a_self, branch.value_self(local), positions);
  Var attended_cross = ops::group_weighted_sum(a_cross, branch.value_cross(local), positions);
  Var joined = ops::add(ops::concat_cols(attended_self, attended_cross), global_same);
  return activate(branch.fuse_norm(branch.fuse(joined)), branch.fuse_activation);
}

Cca Cca::create(ParameterStore& store, const ModelConfig& config, std::mt19937_64& rng) {
  Cca cca;
  cca.cnn_ = make_branch(store, "cca.cnn", config.c1, config.c2, config, rng);
  cca.transformer_ = make_branch(store, "cca.vit", config.c2, config.c1, config, rng);
  cca.ablate_self_head = config.ablate_self_head;
  cca.ablate_cross_head = config.ablate_cross_head;
  return cca;
}

std::pair<Var, Var> Cca::forward(const Var& x1, const Var& x2, int positions, CcaTrace* trace) const {
  if (x1.rows() != x2.rows()) {
    throw ShapeError("CCA: branch grids differ (" + shape_str(x1.shape()) + " vs " + shape_str(x2.shape()) + ")");
  }
  if (x1.cols() != cnn_.channels || x2.cols() != transformer_.channels) {
    throw ShapeError("CCA: channel counts do not match the built branches");
  }
  Var g1 = ops::group_mean_rows(x1, positions);
  Var g2 = ops::group_mean_rows(x2, positions);
  const int count = g1.rows();

  Var self1 = ablate_self_head ? uniform_weights(count, positions) : cca_attention_weights(x1, g1, cnn_.self_head, positions);
  Var cross1 = ablate_cross_head ? uniform_weights(count, positions) : cca_attention_weights(x1, g2, cnn_.cross_head, positions);
  Var self2 = ablate_self_head ? uniform_weights(count, positions)
                               : cca_attention_weights(x2, g2, transformer_.self_head, positions);
  Var cross2 = ablate_cross_head ? uniform_weights(count, positions)
                                 : cca_attention_weights(x2, g1, transformer_.cross_head, positions);
  if (trace) {
    trace->self_cnn = self1.value();
    trace->cross_cnn = cross1.value();
    trace->self_transformer = self2.value();
    trace->cross_transformer = cross2.value();
  }
  Var f1 = cca_attend_and_fuse(x1, self1, cross1, g1, cnn_, positions);
  Var f2 = cca_attend_and_fuse(x2, self2, cross2, g2, transformer_, positions);
  return {f1, f2};
}

AttentionMap attention_map(const SpatialFeatureMap& local, const FrameFeatureVector& global_query, const CcaHead& head,
                           AttentionKind kind) {
  if (local.channels != head.key_proj.in_features) {
    throw ShapeError("attention_map: local map has " + std::to_string(local.channels) + " channels, key projection expects " +
                     std::to_string(head.key_proj.in_features));
  }
  if (static_cast<int>(global_query.values.size()) != head.query_proj.in_features) {
    throw ShapeError("attention_map: query has " + std::to_string(global_query.values.size()) +
                     " values, query projection expects " + std::to_string(head.query_proj.in_features));
  }
  NoGradGuard no_grad;
  Var w = cca_attention_weights(ops::constant(local.as_rows()), vector_row(global_query.values), head, local.positions());
  AttentionMap map;
  map.height = local.height;
  map.width = local.width;
  map.weights = w.value().data;
  map.kind = kind;
  map.branch = local.branch;
  return map;
}

FusedFrameFeature attend_and_fuse(const SpatialFeatureMap& local, const AttentionMap& a_self, const AttentionMap& a_cross,
                                  const FrameFeatureVector& global_same, const CcaBranch& branch) {
  for (const AttentionMap* a : {&a_self, &a_cross}) {
    if (a->height != local.height || a->width != local.width ||
        a->weights.size() != static_cast<std::size_t>(local.positions())) {
      throw ShapeError("attend_and_fuse: attention map grid does not match the local feature map");
    }
  }
  if (local.channels != branch.channels || static_cast<int>(global_same.values.size()) != branch.channels) {
    throw ShapeError("attend_and_fuse: feature widths do not match the branch");
  }
  NoGradGuard no_grad;
  const int p = local.positions();
  Var out = cca_attend_and_fuse(ops::constant(local.as_rows()), ops::constant(Tensor({1, p}, a_self.weights)),
                                ops::constant(Tensor({1, p}, a_cross.weights)), vector_row(global_same.values), branch, p);
  return {out.value().data, local.branch};
}

std::pair<FusedFrameFeature, FusedFrameFeature> cca_forward(const Cca& cca, const SpatialFeatureMap& x1,
                                                            const SpatialFeatureMap& x2) {
  if (x1.branch != Branch::Cnn || x2.branch != Branch::Transformer) {
    throw ShapeError("cca_forward: expects a CNN map and a Transformer map");
  }
  if (x1.height != x2.height || x1.width != x2.width) throw ShapeError("cca_forward: branch grids differ");
  NoGradGuard no_grad;
  auto [f1, f2] = cca.forward(ops::constant(x1.as_rows()), ops::constant(x2.as_rows()), x1.positions());
  return {{f1.value().data, Branch::Cnn}, {f2.value().data, Branch::Transformer}};
}

}  // namespace dcct
