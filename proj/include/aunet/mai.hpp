#pragma once

// Modality-aware interaction: directional cross-attention between modality
// pairs, gated by availability, then per-modality residual fusion and a
// concatenation fusion across the three modality slots.

#include <array>
#include <string>
#include <vector>

#include "aunet/autograd.hpp"
#include "aunet/backbone.hpp"
#include "aunet/datagen.hpp"
#include "aunet/layers.hpp"

namespace aunet {

// First letter is the query (target) modality, second the key/value source.
// Enumerators are in sorted-name order, which is also the summation order.
enum class Mechanism : int { kNR, kNT, kRN, kRT, kTN, kTR };

inline constexpr std::array<Mechanism, 6> kMechanisms = {
    Mechanism::kNR, Mechanism::kNT, Mechanism::kRN,
    Mechanism::kRT, Mechanism::kTN, Mechanism::kTR};

Modality query_modality(Mechanism m);
Modality source_modality(Mechanism m);
std::string mechanism_name(Mechanism m);
Mechanism mechanism_of(Modality query, Modality source);  // throws ShapeError if equal

// Active mechanisms for `v`, sorted. Throws NoModalityError on (0,0,0).
std::vector<Mechanism> gate_interactions(AvailabilityVector v);

// Pooling -> flatten -> linear -> layer norm. Produces [g*g, c].
struct TokenProjector {
  Linear proj;
  LayerNorm norm;

  static TokenProjector create(ParameterStore& store, const std::string& name, int in_channels,
                               int dim, Rng& rng);
  ag::Var operator()(ag::Var feature, int grid) const;
};

ag::Var tokens_from_feature(ag::Var feature, int grid, const TokenProjector& projector);

// Softmax(Q K^T / sqrt(c)) over keys: [Lq, Lk].
ag::Var attention_weights(ag::Var q, ag::Var k);
// softmax(Q K^T / sqrt(c)) V: [Lq, c].
ag::Var cross_attend(ag::Var q, ag::Var k, ag::Var v);

struct Complement {
  ag::Var tokens;  // [g*g, c]
  ag::Var weight;  // scalar
};

// F + bilinear(reshape(projection(sum_k W_k T_k))), or F itself when there is
// nothing to add.
ag::Var fuse_modality(ag::Var f_csr, const std::vector<Complement>& complements,
                      const Linear& projection, int grid);

// Concatenation of the (R, N, T) slots followed by two 1x1 conv + norm + ReLU
// blocks back to the single-modality width.
struct FinalFusion {
  ConvNormAct first;
  ConvNormAct second;

  static FinalFusion create(ParameterStore& store, const std::string& name, int channels,
                            int groups, Rng& rng);
  ag::Var operator()(ag::Var r, ag::Var n, ag::Var t) const;
};

struct MaiConfig {
  int attention_dim = 32;
  std::vector<int> token_grids = {8, 4, 2};  // per pyramid level
  double weight_init = 1.0;
  double weight_lr_scale = 0.01;
  int groups = 8;

  void validate() const;
};

// One attention matrix captured for inspection.
struct AttentionRecord {
  int level = 0;
  Mechanism mechanism = Mechanism::kNR;
  int rows = 0;
  int cols = 0;
  std::vector<double> weights;
};

class Mai {
 public:
  // `channels` are the per-level feature widths.
  Mai(ParameterStore& store, const MaiConfig& config, const std::vector<int>& channels, Rng& rng,
      const std::string& prefix = "mai");

  // `refined[m]` is the refined pyramid of modality m, ignored when v[m] = 0.
  // Appends one record per evaluated attention when `dump` is non-null.
  FeaturePyramid forward(ag::Tape& tape, const std::array<FeaturePyramid, 3>& refined,
                         AvailabilityVector v, std::vector<AttentionRecord>* dump = nullptr) const;

  // Single-level path, exposed for tests.
  ag::Var forward_level(ag::Tape& tape, int level, const std::array<ag::Var, 3>& refined,
                        AvailabilityVector v, std::vector<AttentionRecord>* dump = nullptr) const;

  const MaiConfig& config() const { return config_; }
  const Parameter& fusion_weight(int level, Mechanism m) const;

 private:
  struct MechanismParams {
    TokenProjector query;
    TokenProjector key;
    TokenProjector value;
    const Parameter* weight = nullptr;
  };
  struct Level {
    int grid = 0;
    std::array<MechanismParams, 6> mechanisms;
    std::array<Linear, 3> out_proj;  // per target modality, attention dim -> channels
    FinalFusion fusion;
  };

  MaiConfig config_;
  std::vector<Level> levels_;
};

// Plain-text listing of attention records, one matrix per block.
std::string format_attention(const std::vector<AttentionRecord>& records);

}  // namespace aunet
