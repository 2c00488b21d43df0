#include "aunet/mai.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "aunet/error.hpp"

namespace aunet {

namespace {

struct MechanismPair {
  Modality query;
  Modality source;
};

constexpr MechanismPair kPairs[6] = {
    {Modality::kNir, Modality::kRgb},  // NR
    {Modality::kNir, Modality::kTir},  // NT
    {Modality::kRgb, Modality::kNir},  // RN
    {Modality::kRgb, Modality::kTir},  // RT
    {Modality::kTir, Modality::kNir},  // TN
    {Modality::kTir, Modality::kRgb},  // TR
};

}  // namespace

Modality query_modality(Mechanism m) { return kPairs[static_cast<int>(m)].query; }
Modality source_modality(Mechanism m) { return kPairs[static_cast<int>(m)].source; }

std::string mechanism_name(Mechanism m) {
  return {modality_letter(query_modality(m)), modality_letter(source_modality(m))};
}

Mechanism mechanism_of(Modality query, Modality source) {
  for (Mechanism m : kMechanisms)
    if (query_modality(m) == query && source_modality(m) == source) return m;
  throw ShapeError("no mechanism pairs a modality with itself");
}

std::vector<Mechanism> gate_interactions(AvailabilityVector v) {
  if (!v.any()) throw NoModalityError("availability vector 000 has no modality");
  std::vector<Mechanism> out;
  for (Mechanism m : kMechanisms)
    if (v[query_modality(m)] && v[source_modality(m)]) out.push_back(m);
  return out;
}

TokenProjector TokenProjector::create(ParameterStore& store, const std::string& name,
                                      int in_channels, int dim, Rng& rng) {
  return {Linear::create(store, name + ".proj", in_channels, dim, rng),
          LayerNorm::create(store, name + ".norm", dim)};
}

ag::Var TokenProjector::operator()(ag::Var feature, int grid) const {
  if (feature.shape().size() != 3) throw ShapeError("tokens: expected [C,H,W], got " + shape_str(feature.shape()));
  const int c = feature.dim(0);
  const ag::Var pooled = ag::adaptive_avg_pool(feature, grid, grid);
  const ag::Var flat = ag::transpose2d(ag::reshape(pooled, {c, grid * grid}));
  return norm(proj(flat));
}

ag::Var tokens_from_feature(ag::Var feature, int grid, const TokenProjector& projector) {
  return projector(feature, grid);
}

ag::Var attention_weights(ag::Var q, ag::Var k) {
  if (q.shape().size() != 2 || k.shape().size() != 2 || q.dim(1) != k.dim(1))
    throw ShapeError("attention: query " + shape_str(q.shape()) + " vs key " + shape_str(k.shape()));
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  return ag::softmax_rows(ag::scale(ag::matmul_nt(q, k), inv));
}

ag::Var cross_attend(ag::Var q, ag::Var k, ag::Var v) {
  if (v.shape().size() != 2 || k.shape().size() != 2 || v.dim(0) != k.dim(0) ||
      v.dim(1) != q.dim(1))
    throw ShapeError("cross_attend: key " + shape_str(k.shape()) + " vs value " + shape_str(v.shape()) +
                     " vs query " + shape_str(q.shape()));
  return ag::matmul(attention_weights(q, k), v);
}

ag::Var fuse_modality(ag::Var f_csr, const std::vector<Complement>& complements,
                      const Linear& projection, int grid) {
  if (complements.empty()) return f_csr;
  std::vector<ag::Var> terms;
  terms.reserve(complements.size());
  for (const Complement& c : complements) {
    if (c.tokens.dim(0) != grid * grid)
      throw ShapeError("fuse: " + std::to_string(c.tokens.dim(0)) + " tokens for a " +
                       std::to_string(grid) + "x" + std::to_string(grid) + " grid");
    terms.push_back(ag::mul_scalar(c.tokens, c.weight));
  }
  const ag::Var summed = terms.size() == 1 ? terms[0] : ag::add_n(terms);
  const ag::Var projected = projection(summed);  // [L, C]
  const int channels = projected.dim(1);
  if (channels != f_csr.dim(0))
    throw ShapeError("fuse: projection width " + std::to_string(channels) + " vs feature " +
                     shape_str(f_csr.shape()));
  const ag::Var map = ag::reshape(ag::transpose2d(projected), {channels, grid, grid});
  return ag::add(ag::bilinear_resize(map, f_csr.dim(1), f_csr.dim(2)), f_csr);
}

FinalFusion FinalFusion::create(ParameterStore& store, const std::string& name, int channels,
                                int groups, Rng& rng) {
  return {ConvNormAct::create(store, name + ".0", 3 * channels, channels, 1, 1, groups, rng),
          ConvNormAct::create(store, name + ".1", channels, channels, 1, 1, groups, rng)};
}

ag::Var FinalFusion::operator()(ag::Var r, ag::Var n, ag::Var t) const {
  const ag::Var parts[] = {r, n, t};
  for (const ag::Var& p : parts)
    if (p.shape() != r.shape())
      throw ShapeError("final fusion: " + shape_str(p.shape()) + " vs " + shape_str(r.shape()));
  return second(first(ag::concat_channels(parts)));
}

void MaiConfig::validate() const {
  if (attention_dim < 1) throw ConfigError("attention dim must be positive");
  if (token_grids.size() != static_cast<std::size_t>(kLevelCount))
    throw ConfigError("expected " + std::to_string(kLevelCount) + " token grids");
  for (int g : token_grids)
    if (g < 1) throw ConfigError("token grids must be positive");
}

Mai::Mai(ParameterStore& store, const MaiConfig& config, const std::vector<int>& channels,
         Rng& rng, const std::string& prefix)
    : config_(config) {
  config_.validate();
  if (channels.size() != config_.token_grids.size())
    throw ConfigError("level widths do not match token grids");
  const int c = config_.attention_dim;
  for (std::size_t l = 0; l < channels.size(); ++l) {
    const std::string lp = prefix + ".level" + std::to_string(l);
    Level level;
    level.grid = config_.token_grids[l];
    for (Mechanism m : kMechanisms) {
      const std::string mp = lp + "." + mechanism_name(m);
      MechanismParams& p = level.mechanisms[static_cast<std::size_t>(m)];
      p.query = TokenProjector::create(store, mp + ".q", channels[l], c, rng);
      p.key = TokenProjector::create(store, mp + ".k", channels[l], c, rng);
      p.value = TokenProjector::create(store, mp + ".v", channels[l], c, rng);
      Parameter& w = store.create(mp + ".weight", {1}, config_.weight_lr_scale);
      init_constant(w, config_.weight_init);
      p.weight = &w;
    }
    for (Modality m : kModalities)
      level.out_proj[index_of(m)] =
          Linear::create(store, lp + ".out." + modality_letter(m), c, channels[l], rng);
    level.fusion = FinalFusion::create(store, lp + ".fusion", channels[l], config_.groups, rng);
    levels_.push_back(std::move(level));
  }
}

const Parameter& Mai::fusion_weight(int level, Mechanism m) const {
  return *levels_.at(static_cast<std::size_t>(level)).mechanisms[static_cast<std::size_t>(m)].weight;
}

ag::Var Mai::forward_level(ag::Tape& tape, int level, const std::array<ag::Var, 3>& refined,
                           AvailabilityVector v, std::vector<AttentionRecord>* dump) const {
  const Level& lv = levels_.at(static_cast<std::size_t>(level));
  const std::vector<Mechanism> active = gate_interactions(v);

  Shape shape;
  for (Modality m : kModalities)
    if (v[m]) {
      shape = refined[index_of(m)].shape();
      break;
    }

  std::array<std::vector<Complement>, 3> complements;
  for (Mechanism m : active) {
    const MechanismParams& p = lv.mechanisms[static_cast<std::size_t>(m)];
    const ag::Var target = refined[index_of(query_modality(m))];
    const ag::Var source = refined[index_of(source_modality(m))];
    const ag::Var q = p.query(target, lv.grid);
    const ag::Var k = p.key(source, lv.grid);
    const ag::Var val = p.value(source, lv.grid);
    const ag::Var a = attention_weights(q, k);
    if (dump)
      dump->push_back({level, m, a.dim(0), a.dim(1), std::vector<double>(a.value().begin(), a.value().end())});
    complements[index_of(query_modality(m))].push_back({ag::matmul(a, val), tape.param(*p.weight)});
  }

  std::array<ag::Var, 3> fused;
  for (Modality m : kModalities) {
    const std::size_t i = index_of(m);
    fused[i] = v[m] ? fuse_modality(refined[i], complements[i], lv.out_proj[i], lv.grid)
                    : tape.zeros(shape);
  }
  return lv.fusion(fused[0], fused[1], fused[2]);
}

FeaturePyramid Mai::forward(ag::Tape& tape, const std::array<FeaturePyramid, 3>& refined,
                            AvailabilityVector v, std::vector<AttentionRecord>* dump) const {
  if (!v.any()) throw NoModalityError("availability vector 000 has no modality");
  FeaturePyramid out;
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    std::array<ag::Var, 3> maps;
    int stride = 0;
    for (Modality m : kModalities) {
      if (!v[m]) continue;
      const FeaturePyramid& p = refined[index_of(m)];
      if (p.size() != levels_.size())
        throw ShapeError("pyramid of " + std::string(modality_name(m)) + " has " +
                         std::to_string(p.size()) + " levels");
      maps[index_of(m)] = p[l].data;
      stride = p[l].stride;
    }
    out.push_back({forward_level(tape, static_cast<int>(l), maps, v, dump), stride});
  }
  return out;
}

std::string format_attention(const std::vector<AttentionRecord>& records) {
  std::ostringstream os;
  char buf[32];
  for (const AttentionRecord& r : records) {
    os << "attention level=" << r.level << " mechanism=" << mechanism_name(r.mechanism)
       << " rows=" << r.rows << " cols=" << r.cols << '\n';
    for (int i = 0; i < r.rows; ++i) {
      for (int j = 0; j < r.cols; ++j) {
        std::snprintf(buf, sizeof buf, "%.6f", r.weights[static_cast<std::size_t>(i) * r.cols + j]);
        os << (j ? " " : "") << buf;
      }
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace aunet
