#include "dcct/hta.hpp"

#include <cmath>

#include "dcct/errors.hpp"
#include "dcct/ops.hpp"

namespace dcct {

TemporalTransformer TemporalTransformer::create(ParameterStore& store, const std::string& name, int channels, int frames,
                                                int heads, int ffn_mult, std::mt19937_64& rng) {
  if (heads <= 0 || channels % heads != 0) {
    throw ConfigError(name + ": " + std::to_string(channels) + " channels not divisible by " + std::to_string(heads) + " heads");
  }
  TemporalTransformer tt;
  tt.channels_ = channels;
  tt.frames_ = frames;
  tt.heads_ = heads;
  tt.position_ = store.create_normal(name + ".pos_embed", {frames, channels}, 0.02, rng);
  tt.query_ = Linear::create(store, name + ".query", channels, channels, true, rng);
  tt.key_ = Linear::create(store, name + ".key", channels, channels, true, rng);
  tt.value_ = Linear::create(store, name + ".value", channels, channels, true, rng);
  tt.ffn_in_ = Linear::create(store, name + ".ffn_in", channels, channels * ffn_mult, true, rng);
  tt.ffn_out_ = Linear::create(store, name + ".ffn_out", channels * ffn_mult, channels, true, rng);
  tt.ffn_norm_ = LayerNorm::create(store, name + ".ffn_norm", channels);
  return tt;
}

Var TemporalTransformer::forward(const Var& seq, std::vector<double>* probs) const {
  if (seq.shape().size() != 2 || seq.cols() != channels_) {
    throw ShapeError("temporal transformer: expected width " + std::to_string(channels_) + ", got " + shape_str(seq.shape()));
  }
  if (seq.rows() % frames_ != 0) {
    throw ShapeError("temporal transformer: sequence of " + std::to_string(seq.rows()) +
                     " rows does not match the position embedding length " + std::to_string(frames_));
  }
  Var e = ops::add_tiled(seq, position_);
  const double scale = 1.0 / std::sqrt(static_cast<double>(channels_ / heads_));
  Var z = ops::multi_head_attention(query_(e), key_(e), value_(e), frames_, heads_, scale, probs);
  Var h = ops::add(z, seq);
  return ffn_norm_(ffn_out_(ops::relu(ffn_in_(h))));
}

GateResult gated_attention_forward(const GatedAttention& ga, const Var& s1, const Var& s2, const Var& s3, int frames,
                                   bool enabled) {
  if (s3.cols() != ga.decouple_cnn.in_features || s1.cols() != ga.gate_cnn.in_features ||
      s2.cols() != ga.gate_vit.in_features) {
    throw ShapeError("gated attention: feature widths do not match the gate layers");
  }
  if (s1.rows() != s3.rows() * frames || s2.rows() != s1.rows()) {
    throw ShapeError("gated attention: frame counts do not match the aggregated feature");
  }
  GateResult r;
  r.decoupled1 = ga.decouple_cnn(s3);
  r.decoupled2 = ga.decouple_vit(s3);
  Var rep1 = ops::repeat_rows(r.decoupled1, frames);
  Var rep2 = ops::repeat_rows(r.decoupled2, frames);
  if (enabled) {
    r.gate1 = ops::sigmoid(ga.gate_cnn(ops::mul(s1, rep1)));
    r.gate2 = ops::sigmoid(ga.gate_vit(ops::mul(s2, rep2)));
    r.m1 = ops::add(ops::mul(r.gate1, s1), ops::mul(ops::one_minus(r.gate1), rep1));
    r.m2 = ops::add(ops::mul(r.gate2, s2), ops::mul(ops::one_minus(r.gate2), rep2));
  } else {
    r.gate1 = ops::constant(Tensor(s1.shape(), 1.0));
    r.gate2 = ops::constant(Tensor(s2.shape(), 1.0));
    r.m1 = s1;
    r.m2 = s2;
  }
  return r;
}

Hta Hta::create(ParameterStore& store, const ModelConfig& config, std::mt19937_64& rng) {
  Hta hta;
  hta.frames_ = config.frames_T;
  hta.use_temporal_transformer = config.use_temporal_transformer;
  hta.use_aggregated_transformer = config.use_aggregated_transformer;
  hta.use_gated_attention = config.use_gated_attention;
  const int video = config.c1 + config.c2;
  for (int k = 0; k < config.hta_depth; ++k) {
    const std::string name = "hta.layer" + std::to_string(k);
    HtaLayer layer{
        TemporalTransformer::create(store, name + ".tt1", config.c1, config.frames_T, config.num_heads, config.ffn_mult, rng),
        TemporalTransformer::create(store, name + ".tt2", config.c2, config.frames_T, config.num_heads, config.ffn_mult, rng),
        TemporalTransformer::create(store, name + ".at", video, config.frames_T, config.num_heads, config.ffn_mult, rng),
        {}};
    layer.gate.decouple_cnn = Linear::create(store, name + ".ga.omega1", video, config.c1, true, rng);
    layer.gate.decouple_vit = Linear::create(store, name + ".ga.omega2", video, config.c2, true, rng);
    layer.gate.gate_cnn = Linear::create(store, name + ".ga.phi1", config.c1, config.c1, true, rng);
    layer.gate.gate_vit = Linear::create(store, name + ".ga.phi2", config.c2, config.c2, true, rng);
    hta.layers_.push_back(std::move(layer));
  }
  return hta;
}

HtaOutput Hta::forward(const Var& f1, const Var& f2, int depth, HtaTrace* trace) const {
  if (depth < 1) throw ConfigError("HTA depth must be >= 1 (got " + std::to_string(depth) + ")");
  if (depth > static_cast<int>(layers_.size())) {
    throw ConfigError("HTA depth " + std::to_string(depth) + " exceeds the " + std::to_string(layers_.size()) + " built layers");
  }
  if (f1.rows() != f2.rows()) throw ShapeError("HTA: branch sequences have different lengths");
  if (f1.rows() % frames_ != 0) throw ShapeError("HTA: sequence length is not a multiple of T");

  HtaOutput out;
  Var m1 = f1;
  Var m2 = f2;
  for (int k = 0; k < depth; ++k) {
    const HtaLayer& layer = layers_[k];
    std::vector<double> p1, p2, p3;
    Var s1 = use_temporal_transformer ? layer.tt_cnn.forward(m1, trace ? &p1 : nullptr) : m1;
    Var s2 = use_temporal_transformer ? layer.tt_vit.forward(m2, trace ? &p2 : nullptr) : m2;
    Var joined = ops::concat_cols(s1, s2);
    Var s3_seq = use_aggregated_transformer ? layer.aggregate.forward(joined, trace ? &p3 : nullptr) : joined;
    Var s3 = ops::group_mean_rows(s3_seq, frames_);
    GateResult g = gated_attention_forward(layer.gate, s1, s2, s3, frames_, use_gated_attention);
    if (trace) {
      for (auto* p : {&p1, &p2, &p3}) {
        if (!p->empty()) trace->attention.push_back(std::move(*p));
      }
      if (use_gated_attention) {
        trace->gates.push_back(g.gate1.value());
        trace->gates.push_back(g.gate2.value());
      }
    }
    m1 = g.m1;
    m2 = g.m2;
    out.s3_sequence = s3_seq;
    out.s3 = s3;
  }
  out.m1 = m1;
  out.m2 = m2;
  return out;
}

namespace {

Var row_var(const std::vector<double>& v) { return ops::constant(Tensor({1, static_cast<int>(v.size())}, v)); }

void require_sequence(const TemporalSequence& s, const char* who) {
  if (s.frames.rank() != 2) throw ShapeError(std::string(who) + ": sequence must be [T, C]");
}

}  // namespace

TemporalSequence temporal_transformer_forward(const TemporalSequence& seq, const TemporalTransformer& tt) {
  require_sequence(seq, "temporal_transformer_forward");
  if (seq.frames.rows() != tt.frames()) {
    throw ShapeError("temporal_transformer_forward: sequence has " + std::to_string(seq.frames.rows()) +
                     " frames, position embedding has " + std::to_string(tt.frames()));
  }
  NoGradGuard no_grad;
  return {tt.forward(ops::constant(seq.frames)).value()};
}

std::pair<TemporalSequence, AggregatedVideoFeature> aggregated_transformer_forward(const TemporalSequence& s1,
                                                                                   const TemporalSequence& s2,
                                                                                   const TemporalTransformer& at) {
  require_sequence(s1, "aggregated_transformer_forward");
  require_sequence(s2, "aggregated_transformer_forward");
  if (s1.frames.rows() != s2.frames.rows()) throw ShapeError("aggregated_transformer_forward: frame counts differ");
  if (s1.frames.rows() != at.frames()) throw ShapeError("aggregated_transformer_forward: T does not match the position embedding");
  NoGradGuard no_grad;
  Var tokens = at.forward(ops::concat_cols(ops::constant(s1.frames), ops::constant(s2.frames)));
  Var pooled = ops::group_mean_rows(tokens, tokens.rows());
  return {{tokens.value()}, {pooled.value().data}};
}

RefinedFrames gated_attention(const FrameFeatureVector& s1_t, const FrameFeatureVector& s2_t,
                              const AggregatedVideoFeature& s3, const GatedAttention& ga) {
  NoGradGuard no_grad;
  GateResult g = gated_attention_forward(ga, row_var(s1_t.values), row_var(s2_t.values), row_var(s3.values), 1, true);
  RefinedFrames r;
  r.m1 = {g.m1.value().data, FeatureStage::Gated};
  r.m2 = {g.m2.value().data, FeatureStage::Gated};
  r.gate1 = g.gate1.value().data;
  r.gate2 = g.gate2.value().data;
  r.decoupled1 = g.decoupled1.value().data;
  r.decoupled2 = g.decoupled2.value().data;
  return r;
}

HtaResult hta_forward(const Hta& hta, const TemporalSequence& f1, const TemporalSequence& f2, int depth) {
  require_sequence(f1, "hta_forward");
  require_sequence(f2, "hta_forward");
  NoGradGuard no_grad;
  HtaOutput out = hta.forward(ops::constant(f1.frames), ops::constant(f2.frames), depth);
  return {{out.m1.value()}, {out.m2.value()}, {out.s3.value().data}};
}

}  // namespace dcct
