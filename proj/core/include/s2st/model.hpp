#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "s2st/autodiff.hpp"
#include "s2st/corpus.hpp"
#include "s2st/kv.hpp"
#include "s2st/nn.hpp"
#include "s2st/units.hpp"

namespace s2st::model {

enum class Mode { stacked, reduced, r1 };

const char* mode_name(Mode m);
Mode mode_from_name(const std::string& name);

/// Training-only auxiliary decoder attached to an intermediate encoder layer.
/// kind is one of "source-chars", "target-chars", "source-units".
struct AuxTaskSpec {
  std::string kind;
  int attach_layer{1};
};

struct ModelConfig {
  Mode mode = Mode::reduced;
  int num_units = 20;       // K
  int reduction = 1;        // r; > 1 only in stacked mode
  int source_dim = 16;

  int conv_layers = 2;
  int conv_kernel = 5;
  int conv_channels = 128;  // pre-GLU channels of the non-final conv layers

  int embed_dim = 64;
  int ffn_dim = 256;
  int enc_layers = 4;
  int enc_heads = 4;
  int dec_layers = 2;
  int dec_heads = 4;

  double dropout = 0.1;
  double label_smoothing = 0.2;

  std::vector<AuxTaskSpec> aux_tasks;
  int source_unit_vocab = 20;  // vocabulary of the source-units aux targets

  bool ctc_enabled = true;
  int ctc_attach_layer = 1;

  double lambda_aux = 8.0;
  double lambda_ctc = 1.6;
  double lambda_dur = 1.0;

  uint64_t seed = 1;

  void validate() const;
  kv::Document to_kv() const;
  static ModelConfig from_kv(const kv::Document& doc);

  static ModelConfig desk_preset();
  static ModelConfig paper_preset();

  // Unit vocabulary layout: 0..K-1 units, K = EOS (doubles as the stacked
  // pad/stop id), K+1 = BOS (input-side only).
  int unit_eos() const { return num_units; }
  int unit_bos() const { return num_units + 1; }
  int unit_embed_rows() const { return num_units + 2; }
  int unit_group_width() const { return num_units + 1; }
  int unit_head_width() const {
    return mode == Mode::stacked ? reduction * unit_group_width() : unit_group_width();
  }
  int ctc_classes() const { return corpus::CharVocab::kLetters + 1; }  // letters + blank

  int aux_vocab(const AuxTaskSpec& task) const;      // embedding rows
  int aux_head_width(const AuxTaskSpec& task) const;
  int aux_bos(const AuxTaskSpec& task) const;
  int aux_eos(const AuxTaskSpec& task) const;

  int encoder_output_length(int num_frames) const;
};

/// One prepared training example. Lengths are explicit so batches may carry
/// padded tensors; the model only reads the first source_len frames.
struct TrainItem {
  std::string id;
  Eigen::MatrixXd source_frames;
  int source_len{0};

  // reduced / r1 targets
  std::vector<int> unit_inputs;   // [BOS, z_1..z_n]
  std::vector<int> unit_targets;  // [z_1..z_n, EOS]

  // stacked targets; inputs start with an all-BOS group, targets end with an
  // all-pad stop group
  std::vector<std::vector<int>> group_inputs;
  std::vector<std::vector<int>> group_targets;

  std::vector<std::vector<int>> aux_inputs;   // aligned with config.aux_tasks
  std::vector<std::vector<int>> aux_targets;

  std::vector<int> ctc_targets;  // separator-free letters
  bool has_ctc{false};

  int decoder_positions() const {
    return static_cast<int>(unit_targets.empty() ? group_targets.size() : unit_targets.size());
  }
};

struct TrainItemOptions {
  bool apply_cmvn = true;
  const units::Codebook* source_codebook = nullptr;  // for source-units aux targets
};

TrainItem make_train_item(const corpus::Utterance& utt, const ModelConfig& cfg,
                          const TrainItemOptions& opts);

struct LossBreakdown {
  double unit_loss{0.0};
  std::vector<std::pair<std::string, double>> aux_losses;
  double ctc_loss{0.0};
  double total{0.0};
  int ctc_skipped{0};

  double aux_sum() const;
  /// Name of the first non-finite component, or nullptr when all are finite.
  const char* first_non_finite() const;
};

/// Incremental decoding state for one hypothesis.
struct DecoderCache {
  struct Layer {
    Eigen::MatrixXd self_k;  // len x d, grows one row per step
    Eigen::MatrixXd self_v;
  };
  std::vector<Layer> layers;
  int length{0};
};

/// Per-utterance encoder products shared by all hypotheses.
struct DecodingContext {
  Eigen::MatrixXd memory;  // enc_len x d
  std::vector<Eigen::MatrixXd> cross_k;  // per decoder layer
  std::vector<Eigen::MatrixXd> cross_v;
  int enc_len{0};
};

struct DecodeStepOut {
  Eigen::MatrixXd log_probs;     // reduced/r1: 1 x (K+1); stacked: r x (K+1)
  Eigen::VectorXd attach_state;  // CTC attach-layer output at this position
};

class S2UTModel {
 public:
  explicit S2UTModel(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  /// Teacher-forced losses over a batch. When accumulate_grads is set, the
  /// scaled per-utterance gradients are pushed into the parameter grads.
  LossBreakdown forward_train(const std::vector<TrainItem>& batch, uint64_t step_seed,
                              bool training, bool accumulate_grads);

  /// Sum of chosen log-probabilities of the item's unit targets under
  /// teacher forcing (the beam-search score of that sequence).
  double teacher_forced_score(const TrainItem& item) const;

  /// Teacher-forced CTC attach-layer states for the item (positions x d).
  Eigen::MatrixXd teacher_forced_attach_states(const TrainItem& item) const;

  // -- incremental inference ------------------------------------------
  DecodingContext make_decoding_context(const Eigen::MatrixXd& source_frames) const;
  /// Advances one decode step. prev holds the previous output: a single token
  /// for reduced/r1, a group of r units for stacked; BOS/BOS-group at step 0.
  DecodeStepOut decode_step(const DecodingContext& ctx, DecoderCache& cache,
                            const std::vector<int>& prev) const;

  /// CTC projection + log-softmax of attach-layer states (rows).
  Eigen::MatrixXd ctc_log_probs(const Eigen::MatrixXd& states) const;

  uint64_t parameter_checksum() const { return params_.checksum(); }

 private:
  struct AttnParams {
    ad::Var wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct LayerParams {
    ad::Var ln1_g, ln1_b;
    AttnParams self_attn;
    ad::Var lnc_g, lnc_b;  // decoder cross-attention norm
    AttnParams cross_attn;
    ad::Var ln2_g, ln2_b;
    ad::Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  };
  struct DecoderParams {
    ad::Var embed;
    std::vector<LayerParams> layers;
    ad::Var final_ln_g, final_ln_b;
    ad::Var head_w, head_b;
  };

  struct UttLosses {
    ad::Var unit;
    std::vector<ad::Var> aux;
    ad::Var ctc;  // undefined when skipped/disabled
    bool ctc_skipped{false};
  };

  ad::Var encode(const Eigen::MatrixXd& frames, int valid_len, std::mt19937_64* rng,
                 std::vector<ad::Var>* taps) const;
  ad::Var run_decoder(const DecoderParams& dp, const ad::Var& input_embeds, const ad::Var& memory,
                      int num_heads, std::mt19937_64* rng, std::vector<ad::Var>* taps) const;
  ad::Var attention(const AttnParams& p, const ad::Var& q_in, const ad::Var& kv_in, int heads,
                    bool causal, std::mt19937_64* rng) const;
  ad::Var embed_unit_inputs(const TrainItem& item) const;
  ad::Var unit_logits(const TrainItem& item, std::mt19937_64* rng,
                      std::vector<ad::Var>* dec_taps) const;
  UttLosses forward_utterance(const TrainItem& item, std::mt19937_64* rng) const;

  ModelConfig cfg_;
  nn::ParamStore params_;

  // Named views into params_, set up at construction.
  std::vector<ad::Var> conv_w_, conv_b_;
  std::vector<LayerParams> enc_layers_;
  ad::Var enc_final_ln_g_, enc_final_ln_b_;
  DecoderParams unit_dec_;
  std::vector<DecoderParams> aux_decs_;
  ad::Var ctc_w_, ctc_b_;
};

// Sinusoidal position encoding (rows = positions).
Eigen::MatrixXd sinusoid_positions(int length, int dim);

}  // namespace s2st::model
