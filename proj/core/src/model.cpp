#include "s2st/model.hpp"

#include <fmt/core.h>

#include <cmath>
#include <sstream>

#include "s2st/ctc.hpp"

namespace s2st::model {

using ad::Mat;
using ad::Var;

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::stacked: return "stacked";
    case Mode::reduced: return "reduced";
    case Mode::r1: return "r1";
  }
  return "reduced";
}

Mode mode_from_name(const std::string& name) {
  if (name == "stacked") return Mode::stacked;
  if (name == "reduced") return Mode::reduced;
  if (name == "r1") return Mode::r1;
  throw ConfigError("unknown mode: " + name + " (expected stacked|reduced|r1)");
}

void ModelConfig::validate() const {
  if (num_units < 2) throw ConfigError("model config: num_units must be >= 2");
  if (mode == Mode::stacked) {
    if (reduction < 1) throw ConfigError("model config: stacked mode needs reduction >= 1");
  } else if (reduction != 1) {
    throw ConfigError("model config: reduction must be 1 outside stacked mode");
  }
  if (source_dim < 1) throw ConfigError("model config: source_dim must be positive");
  if (conv_layers < 0 || conv_kernel < 1 || conv_kernel % 2 == 0)
    throw ConfigError("model config: conv kernel must be odd and positive");
  if (embed_dim < 1 || ffn_dim < 1) throw ConfigError("model config: bad embedding dims");
  if (enc_layers < 1 || dec_layers < 1) throw ConfigError("model config: need at least one layer");
  if (embed_dim % enc_heads != 0 || embed_dim % dec_heads != 0)
    throw ConfigError("model config: embed_dim must divide by the head counts");
  if (conv_layers > 0 && conv_channels % 2 != 0)
    throw ConfigError("model config: conv_channels must be even (GLU halves them)");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model config: dropout must be in [0,1)");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0)
    throw ConfigError("model config: label smoothing must be in [0,1)");
  for (const AuxTaskSpec& t : aux_tasks) {
    if (t.kind != "source-chars" && t.kind != "target-chars" && t.kind != "source-units")
      throw ConfigError("model config: unknown aux task kind: " + t.kind);
    if (t.attach_layer < 1 || t.attach_layer > enc_layers)
      throw ConfigError(fmt::format("model config: aux attach layer {} outside 1..{}", t.attach_layer,
                                    enc_layers));
  }
  if (ctc_enabled && (ctc_attach_layer < 1 || ctc_attach_layer > dec_layers))
    throw ConfigError(fmt::format("model config: ctc attach layer {} outside 1..{}", ctc_attach_layer,
                                  dec_layers));
  if (lambda_aux < 0 || lambda_ctc < 0 || lambda_dur < 0)
    throw ConfigError("model config: loss weights must be >= 0");
  if (source_unit_vocab < 2) throw ConfigError("model config: source_unit_vocab must be >= 2");
}

int ModelConfig::aux_vocab(const AuxTaskSpec& task) const {
  if (task.kind == "source-units") return source_unit_vocab + 2;  // units + eos + bos
  return corpus::CharVocab::kSize;
}

int ModelConfig::aux_head_width(const AuxTaskSpec& task) const {
  if (task.kind == "source-units") return source_unit_vocab + 1;
  return corpus::CharVocab::kSize;
}

int ModelConfig::aux_bos(const AuxTaskSpec& task) const {
  if (task.kind == "source-units") return source_unit_vocab + 1;
  return corpus::CharVocab::kBos;
}

int ModelConfig::aux_eos(const AuxTaskSpec& task) const {
  if (task.kind == "source-units") return source_unit_vocab;
  return corpus::CharVocab::kEos;
}

int ModelConfig::encoder_output_length(int num_frames) const {
  int len = num_frames;
  const int pad = conv_kernel / 2;
  for (int i = 0; i < conv_layers; ++i) len = (len + 2 * pad - conv_kernel) / 2 + 1;
  return len;
}

kv::Document ModelConfig::to_kv() const {
  kv::Document doc;
  doc.set("mode", std::string(mode_name(mode)));
  doc.set("num_units", static_cast<int64_t>(num_units));
  doc.set("reduction", static_cast<int64_t>(reduction));
  doc.set("source_dim", static_cast<int64_t>(source_dim));
  doc.set("conv_layers", static_cast<int64_t>(conv_layers));
  doc.set("conv_kernel", static_cast<int64_t>(conv_kernel));
  doc.set("conv_channels", static_cast<int64_t>(conv_channels));
  doc.set("embed_dim", static_cast<int64_t>(embed_dim));
  doc.set("ffn_dim", static_cast<int64_t>(ffn_dim));
  doc.set("enc_layers", static_cast<int64_t>(enc_layers));
  doc.set("enc_heads", static_cast<int64_t>(enc_heads));
  doc.set("dec_layers", static_cast<int64_t>(dec_layers));
  doc.set("dec_heads", static_cast<int64_t>(dec_heads));
  doc.set("dropout", dropout);
  doc.set("label_smoothing", label_smoothing);
  std::string aux;
  for (const auto& t : aux_tasks) {
    if (!aux.empty()) aux += ",";
    aux += t.kind + "@" + std::to_string(t.attach_layer);
  }
  doc.set("aux_tasks", aux.empty() ? std::string("none") : aux);
  doc.set("source_unit_vocab", static_cast<int64_t>(source_unit_vocab));
  doc.set("ctc_enabled", ctc_enabled);
  doc.set("ctc_attach_layer", static_cast<int64_t>(ctc_attach_layer));
  doc.set("lambda_aux", lambda_aux);
  doc.set("lambda_ctc", lambda_ctc);
  doc.set("lambda_dur", lambda_dur);
  doc.set("seed", static_cast<int64_t>(seed));
  return doc;
}

ModelConfig ModelConfig::from_kv(const kv::Document& doc) {
  ModelConfig cfg;
  cfg.mode = mode_from_name(doc.get_str("mode", mode_name(cfg.mode)));
  cfg.num_units = static_cast<int>(doc.get_int("num_units", cfg.num_units));
  cfg.reduction = static_cast<int>(doc.get_int("reduction", cfg.reduction));
  cfg.source_dim = static_cast<int>(doc.get_int("source_dim", cfg.source_dim));
  cfg.conv_layers = static_cast<int>(doc.get_int("conv_layers", cfg.conv_layers));
  cfg.conv_kernel = static_cast<int>(doc.get_int("conv_kernel", cfg.conv_kernel));
  cfg.conv_channels = static_cast<int>(doc.get_int("conv_channels", cfg.conv_channels));
  cfg.embed_dim = static_cast<int>(doc.get_int("embed_dim", cfg.embed_dim));
  cfg.ffn_dim = static_cast<int>(doc.get_int("ffn_dim", cfg.ffn_dim));
  cfg.enc_layers = static_cast<int>(doc.get_int("enc_layers", cfg.enc_layers));
  cfg.enc_heads = static_cast<int>(doc.get_int("enc_heads", cfg.enc_heads));
  cfg.dec_layers = static_cast<int>(doc.get_int("dec_layers", cfg.dec_layers));
  cfg.dec_heads = static_cast<int>(doc.get_int("dec_heads", cfg.dec_heads));
  cfg.dropout = doc.get_double("dropout", cfg.dropout);
  cfg.label_smoothing = doc.get_double("label_smoothing", cfg.label_smoothing);
  cfg.aux_tasks.clear();
  std::string aux = doc.get_str("aux_tasks", "none");
  if (aux != "none" && !aux.empty()) {
    std::istringstream in(aux);
    std::string part;
    while (std::getline(in, part, ',')) {
      size_t at = part.find('@');
      if (at == std::string::npos) throw ConfigError("aux_tasks: expected kind@layer, got " + part);
      cfg.aux_tasks.push_back({part.substr(0, at), std::stoi(part.substr(at + 1))});
    }
  }
  cfg.source_unit_vocab = static_cast<int>(doc.get_int("source_unit_vocab", cfg.source_unit_vocab));
  cfg.ctc_enabled = doc.get_bool("ctc_enabled", cfg.ctc_enabled);
  cfg.ctc_attach_layer = static_cast<int>(doc.get_int("ctc_attach_layer", cfg.ctc_attach_layer));
  cfg.lambda_aux = doc.get_double("lambda_aux", cfg.lambda_aux);
  cfg.lambda_ctc = doc.get_double("lambda_ctc", cfg.lambda_ctc);
  cfg.lambda_dur = doc.get_double("lambda_dur", cfg.lambda_dur);
  cfg.seed = static_cast<uint64_t>(doc.get_int("seed", static_cast<int64_t>(cfg.seed)));
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::desk_preset() {
  ModelConfig cfg;
  cfg.mode = Mode::reduced;
  cfg.num_units = 20;
  cfg.reduction = 1;
  cfg.source_dim = 16;
  cfg.conv_layers = 2;
  cfg.conv_kernel = 5;
  cfg.conv_channels = 128;
  cfg.embed_dim = 64;
  cfg.ffn_dim = 256;
  cfg.enc_layers = 4;
  cfg.enc_heads = 4;
  cfg.dec_layers = 2;
  cfg.dec_heads = 4;
  cfg.dropout = 0.1;
  cfg.label_smoothing = 0.2;
  cfg.aux_tasks = {{"source-chars", 2}, {"target-chars", 3}};
  cfg.ctc_enabled = true;
  cfg.ctc_attach_layer = 1;
  cfg.lambda_aux = 8.0;
  cfg.lambda_ctc = 1.6;
  cfg.lambda_dur = 1.0;
  return cfg;
}

ModelConfig ModelConfig::paper_preset() {
  ModelConfig cfg;
  cfg.mode = Mode::reduced;
  cfg.num_units = 100;
  cfg.reduction = 1;
  cfg.source_dim = 80;
  cfg.conv_layers = 2;
  cfg.conv_kernel = 5;
  cfg.conv_channels = 1024;
  cfg.embed_dim = 256;
  cfg.ffn_dim = 2048;
  cfg.enc_layers = 12;
  cfg.enc_heads = 4;
  cfg.dec_layers = 6;
  cfg.dec_heads = 8;
  cfg.dropout = 0.1;
  cfg.label_smoothing = 0.2;
  cfg.aux_tasks = {{"source-chars", 6}, {"target-chars", 8}};
  cfg.ctc_enabled = true;
  cfg.ctc_attach_layer = 3;
  cfg.lambda_aux = 8.0;
  cfg.lambda_ctc = 1.6;
  cfg.lambda_dur = 1.0;
  return cfg;
}

Eigen::MatrixXd sinusoid_positions(int length, int dim) {
  Eigen::MatrixXd pe(length, dim);
  for (int pos = 0; pos < length; ++pos) {
    for (int i = 0; i < dim; i += 2) {
      double angle = pos / std::pow(10000.0, static_cast<double>(i) / dim);
      pe(pos, i) = std::sin(angle);
      if (i + 1 < dim) pe(pos, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

namespace {

Mat causal_mask(int n) {
  Mat m = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m(i, j) = -1e30;
  return m;
}

double ls_ce_pick_sum(const Mat& logits, const std::vector<int>& targets) {
  // Sum of chosen log-softmax entries (teacher-forced sequence score).
  double total = 0.0;
  for (int i = 0; i < logits.rows(); ++i) {
    double mx = logits.row(i).maxCoeff();
    double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    total += logits(i, targets[i]) - lse;
  }
  return total;
}

Eigen::RowVectorXd ln_row(const Eigen::RowVectorXd& x, const Mat& g, const Mat& b,
                          double eps = 1e-5) {
  double mu = x.mean();
  double var = (x.array() - mu).square().mean();
  Eigen::RowVectorXd xhat = (x.array() - mu) / std::sqrt(var + eps);
  return xhat.cwiseProduct(g.row(0)) + b.row(0);
}

Eigen::RowVectorXd log_softmax_row(const Eigen::RowVectorXd& x) {
  double mx = x.maxCoeff();
  double lse = mx + std::log((x.array() - mx).exp().sum());
  return (x.array() - lse).matrix();
}

}  // namespace

TrainItem make_train_item(const corpus::Utterance& utt, const ModelConfig& cfg,
                          const TrainItemOptions& opts) {
  if (utt.target_units.empty())
    throw DataError("make_train_item: utterance " + utt.id + " has no target units");

  TrainItem item;
  item.id = utt.id;
  item.source_frames =
      opts.apply_cmvn ? units::cmvn(utt.source_frames.frames) : utt.source_frames.frames;
  item.source_len = static_cast<int>(item.source_frames.rows());

  const int eos = cfg.unit_eos();
  const int bos = cfg.unit_bos();
  if (cfg.mode == Mode::stacked) {
    units::StackedUnits st = units::stack(utt.target_units, cfg.reduction, eos);
    item.group_targets = st.groups;
    item.group_targets.emplace_back(cfg.reduction, eos);  // stop group
    item.group_inputs.emplace_back(cfg.reduction, bos);
    for (size_t g = 0; g + 1 < item.group_targets.size(); ++g)
      item.group_inputs.push_back(item.group_targets[g]);
  } else {
    std::vector<int> seq = cfg.mode == Mode::reduced ? units::reduce(utt.target_units).units
                                                     : utt.target_units;
    item.unit_inputs.push_back(bos);
    item.unit_inputs.insert(item.unit_inputs.end(), seq.begin(), seq.end());
    item.unit_targets = seq;
    item.unit_targets.push_back(eos);
  }

  for (const AuxTaskSpec& task : cfg.aux_tasks) {
    std::vector<int> symbols;
    if (task.kind == "source-chars") {
      symbols = corpus::CharVocab::encode_text(utt.source_text, /*with_separators=*/true);
    } else if (task.kind == "target-chars") {
      symbols = corpus::CharVocab::encode_text(utt.target_text, /*with_separators=*/true);
    } else {  // source-units
      if (!opts.source_codebook)
        throw ConfigError("aux task source-units needs a source codebook");
      units::UnitSequence src_units = units::quantize(utt.source_frames.frames, *opts.source_codebook);
      symbols = units::reduce(src_units).units;
    }
    std::vector<int> inputs;
    inputs.push_back(cfg.aux_bos(task));
    inputs.insert(inputs.end(), symbols.begin(), symbols.end());
    std::vector<int> targets = symbols;
    targets.push_back(cfg.aux_eos(task));
    item.aux_inputs.push_back(std::move(inputs));
    item.aux_targets.push_back(std::move(targets));
  }

  if (cfg.ctc_enabled) {
    for (int t : utt.target_text.tokens) {
      if (t >= corpus::CharVocab::kLetters)
        throw ConfigError(
            "CTC text targets need single-letter token names; target vocabulary must be <= 26");
    }
    item.ctc_targets = corpus::CharVocab::encode_text(utt.target_text, /*with_separators=*/false);
    item.has_ctc = true;
  }
  return item;
}

double LossBreakdown::aux_sum() const {
  double s = 0.0;
  for (const auto& [name, v] : aux_losses) s += v;
  return s;
}

const char* LossBreakdown::first_non_finite() const {
  if (!std::isfinite(unit_loss)) return "unit_loss";
  for (const auto& [name, v] : aux_losses) {
    if (!std::isfinite(v)) return name.c_str();
  }
  if (!std::isfinite(ctc_loss)) return "ctc_loss";
  if (!std::isfinite(total)) return "total";
  return nullptr;
}

S2UTModel::S2UTModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(derive_seed(cfg_.seed, "params"));
  const int d = cfg_.embed_dim;

  auto make_attn = [&](const std::string& prefix) {
    AttnParams p;
    p.wq = params_.xavier(prefix + ".wq", d, d, rng);
    p.bq = params_.zeros(prefix + ".bq", 1, d);
    p.wk = params_.xavier(prefix + ".wk", d, d, rng);
    p.bk = params_.zeros(prefix + ".bk", 1, d);
    p.wv = params_.xavier(prefix + ".wv", d, d, rng);
    p.bv = params_.zeros(prefix + ".bv", 1, d);
    p.wo = params_.xavier(prefix + ".wo", d, d, rng);
    p.bo = params_.zeros(prefix + ".bo", 1, d);
    return p;
  };
  auto make_layer = [&](const std::string& prefix, bool with_cross) {
    LayerParams lp;
    lp.ln1_g = params_.ones(prefix + ".ln1.g", 1, d);
    lp.ln1_b = params_.zeros(prefix + ".ln1.b", 1, d);
    lp.self_attn = make_attn(prefix + ".self");
    if (with_cross) {
      lp.lnc_g = params_.ones(prefix + ".lnc.g", 1, d);
      lp.lnc_b = params_.zeros(prefix + ".lnc.b", 1, d);
      lp.cross_attn = make_attn(prefix + ".cross");
    }
    lp.ln2_g = params_.ones(prefix + ".ln2.g", 1, d);
    lp.ln2_b = params_.zeros(prefix + ".ln2.b", 1, d);
    lp.ffn_w1 = params_.xavier(prefix + ".ffn.w1", d, cfg_.ffn_dim, rng);
    lp.ffn_b1 = params_.zeros(prefix + ".ffn.b1", 1, cfg_.ffn_dim);
    lp.ffn_w2 = params_.xavier(prefix + ".ffn.w2", cfg_.ffn_dim, d, rng);
    lp.ffn_b2 = params_.zeros(prefix + ".ffn.b2", 1, d);
    return lp;
  };

  int in_ch = cfg_.source_dim;
  for (int i = 0; i < cfg_.conv_layers; ++i) {
    const bool last = i + 1 == cfg_.conv_layers;
    const int out_pre_glu = last ? 2 * d : cfg_.conv_channels;
    conv_w_.push_back(
        params_.xavier(fmt::format("conv.{}.w", i), in_ch * cfg_.conv_kernel, out_pre_glu, rng));
    conv_b_.push_back(params_.zeros(fmt::format("conv.{}.b", i), 1, out_pre_glu));
    in_ch = out_pre_glu / 2;
  }
  if (cfg_.conv_layers == 0 && cfg_.source_dim != d)
    throw ConfigError("model config: without conv layers, source_dim must equal embed_dim");

  for (int i = 0; i < cfg_.enc_layers; ++i)
    enc_layers_.push_back(make_layer(fmt::format("enc.{}", i), /*with_cross=*/false));
  enc_final_ln_g_ = params_.ones("enc.final_ln.g", 1, d);
  enc_final_ln_b_ = params_.zeros("enc.final_ln.b", 1, d);

  unit_dec_.embed = params_.xavier("dec.embed", cfg_.unit_embed_rows(), d, rng);
  for (int i = 0; i < cfg_.dec_layers; ++i)
    unit_dec_.layers.push_back(make_layer(fmt::format("dec.{}", i), /*with_cross=*/true));
  unit_dec_.final_ln_g = params_.ones("dec.final_ln.g", 1, d);
  unit_dec_.final_ln_b = params_.zeros("dec.final_ln.b", 1, d);
  unit_dec_.head_w = params_.xavier("dec.head.w", d, cfg_.unit_head_width(), rng);
  unit_dec_.head_b = params_.zeros("dec.head.b", 1, cfg_.unit_head_width());

  for (size_t t = 0; t < cfg_.aux_tasks.size(); ++t) {
    const AuxTaskSpec& task = cfg_.aux_tasks[t];
    DecoderParams dp;
    std::string prefix = fmt::format("aux.{}.{}", t, task.kind);
    dp.embed = params_.xavier(prefix + ".embed", cfg_.aux_vocab(task), d, rng);
    for (int i = 0; i < 2; ++i)  // auxiliary decoders have 2 transformer layers
      dp.layers.push_back(make_layer(fmt::format("{}.{}", prefix, i), /*with_cross=*/true));
    dp.final_ln_g = params_.ones(prefix + ".final_ln.g", 1, d);
    dp.final_ln_b = params_.zeros(prefix + ".final_ln.b", 1, d);
    dp.head_w = params_.xavier(prefix + ".head.w", d, cfg_.aux_head_width(task), rng);
    dp.head_b = params_.zeros(prefix + ".head.b", 1, cfg_.aux_head_width(task));
    aux_decs_.push_back(std::move(dp));
  }

  if (cfg_.ctc_enabled) {
    ctc_w_ = params_.xavier("ctc.head.w", d, cfg_.ctc_classes(), rng);
    ctc_b_ = params_.zeros("ctc.head.b", 1, cfg_.ctc_classes());
  }
}

Var S2UTModel::attention(const AttnParams& p, const Var& q_in, const Var& kv_in, int heads,
                         bool causal, std::mt19937_64* rng) const {
  const int d = cfg_.embed_dim;
  const int dh = d / heads;
  Var q = ad::add_rowvec(ad::matmul(q_in, p.wq), p.bq);
  Var k = ad::add_rowvec(ad::matmul(kv_in, p.wk), p.bk);
  Var v = ad::add_rowvec(ad::matmul(kv_in, p.wv), p.bv);
  Mat mask;
  if (causal) mask = causal_mask(q.rows());
  std::vector<Var> head_outs;
  head_outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Var qh = ad::slice_cols(q, h * dh, dh);
    Var kh = ad::slice_cols(k, h * dh, dh);
    Var vh = ad::slice_cols(v, h * dh, dh);
    Var scores = ad::scale(ad::matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (causal) scores = ad::add_const(scores, mask);
    Var attn = ad::softmax_rows(scores);
    head_outs.push_back(ad::matmul(attn, vh));
  }
  Var out = ad::add_rowvec(ad::matmul(ad::concat_cols(head_outs), p.wo), p.bo);
  if (rng && cfg_.dropout > 0.0) out = ad::dropout(out, cfg_.dropout, *rng);
  return out;
}

Var S2UTModel::encode(const Eigen::MatrixXd& frames, int valid_len, std::mt19937_64* rng,
                      std::vector<Var>* taps) const {
  if (valid_len < 1 || valid_len > frames.rows())
    throw ShapeError("encode: valid length outside the frame matrix");
  Var x(frames.topRows(valid_len));
  for (size_t i = 0; i < conv_w_.size(); ++i) {
    x = ad::conv1d(x, conv_w_[i], conv_b_[i], cfg_.conv_kernel, /*stride=*/2);
    x = ad::glu_cols(x);
  }
  const int d = cfg_.embed_dim;
  x = ad::scale(x, std::sqrt(static_cast<double>(d)));
  x = ad::add_const(x, sinusoid_positions(x.rows(), d));
  if (rng && cfg_.dropout > 0.0) x = ad::dropout(x, cfg_.dropout, *rng);

  for (const LayerParams& lp : enc_layers_) {
    Var h = ad::layer_norm_rows(x, lp.ln1_g, lp.ln1_b);
    x = ad::add(x, attention(lp.self_attn, h, h, cfg_.enc_heads, /*causal=*/false, rng));
    Var f = ad::layer_norm_rows(x, lp.ln2_g, lp.ln2_b);
    f = ad::add_rowvec(ad::matmul(f, lp.ffn_w1), lp.ffn_b1);
    f = ad::relu(f);
    f = ad::add_rowvec(ad::matmul(f, lp.ffn_w2), lp.ffn_b2);
    if (rng && cfg_.dropout > 0.0) f = ad::dropout(f, cfg_.dropout, *rng);
    x = ad::add(x, f);
    if (taps) taps->push_back(x);
  }
  return ad::layer_norm_rows(x, enc_final_ln_g_, enc_final_ln_b_);
}

Var S2UTModel::run_decoder(const DecoderParams& dp, const Var& input_embeds, const Var& memory,
                           int num_heads, std::mt19937_64* rng, std::vector<Var>* taps) const {
  const int d = cfg_.embed_dim;
  Var x = ad::scale(input_embeds, std::sqrt(static_cast<double>(d)));
  x = ad::add_const(x, sinusoid_positions(x.rows(), d));
  if (rng && cfg_.dropout > 0.0) x = ad::dropout(x, cfg_.dropout, *rng);

  for (const LayerParams& lp : dp.layers) {
    Var h = ad::layer_norm_rows(x, lp.ln1_g, lp.ln1_b);
    x = ad::add(x, attention(lp.self_attn, h, h, num_heads, /*causal=*/true, rng));
    Var c = ad::layer_norm_rows(x, lp.lnc_g, lp.lnc_b);
    x = ad::add(x, attention(lp.cross_attn, c, memory, num_heads, /*causal=*/false, rng));
    Var f = ad::layer_norm_rows(x, lp.ln2_g, lp.ln2_b);
    f = ad::add_rowvec(ad::matmul(f, lp.ffn_w1), lp.ffn_b1);
    f = ad::relu(f);
    f = ad::add_rowvec(ad::matmul(f, lp.ffn_w2), lp.ffn_b2);
    if (rng && cfg_.dropout > 0.0) f = ad::dropout(f, cfg_.dropout, *rng);
    x = ad::add(x, f);
    if (taps) taps->push_back(x);
  }
  return ad::layer_norm_rows(x, dp.final_ln_g, dp.final_ln_b);
}

Var S2UTModel::embed_unit_inputs(const TrainItem& item) const {
  if (cfg_.mode == Mode::stacked) {
    std::vector<int> flat;
    flat.reserve(item.group_inputs.size() * cfg_.reduction);
    for (const auto& g : item.group_inputs) {
      if (static_cast<int>(g.size()) != cfg_.reduction)
        throw ShapeError("stacked group size mismatch");
      flat.insert(flat.end(), g.begin(), g.end());
    }
    Var rows = ad::gather_rows(unit_dec_.embed, flat);
    return ad::avg_pool_rows(rows, cfg_.reduction);
  }
  return ad::gather_rows(unit_dec_.embed, item.unit_inputs);
}

Var S2UTModel::unit_logits(const TrainItem& item, std::mt19937_64* rng,
                           std::vector<Var>* dec_taps) const {
  std::vector<Var> enc_taps;
  Var memory = encode(item.source_frames, item.source_len, rng, &enc_taps);
  Var states = run_decoder(unit_dec_, embed_unit_inputs(item), memory, cfg_.dec_heads, rng, dec_taps);
  return ad::add_rowvec(ad::matmul(states, unit_dec_.head_w), unit_dec_.head_b);
}

S2UTModel::UttLosses S2UTModel::forward_utterance(const TrainItem& item,
                                                  std::mt19937_64* rng) const {
  UttLosses out;

  std::vector<Var> enc_taps;
  Var memory = encode(item.source_frames, item.source_len, rng, &enc_taps);

  std::vector<Var> dec_taps;
  Var states =
      run_decoder(unit_dec_, embed_unit_inputs(item), memory, cfg_.dec_heads, rng, &dec_taps);
  Var logits = ad::add_rowvec(ad::matmul(states, unit_dec_.head_w), unit_dec_.head_b);

  if (cfg_.mode == Mode::stacked) {
    const int w = cfg_.unit_group_width();
    std::vector<Var> sub_losses;
    for (int j = 0; j < cfg_.reduction; ++j) {
      std::vector<int> col_targets(item.group_targets.size());
      for (size_t g = 0; g < item.group_targets.size(); ++g) col_targets[g] = item.group_targets[g][j];
      sub_losses.push_back(
          ad::label_smoothed_ce(ad::slice_cols(logits, j * w, w), col_targets, cfg_.label_smoothing));
    }
    out.unit = ad::weighted_sum(sub_losses,
                                std::vector<double>(sub_losses.size(), 1.0 / sub_losses.size()));
  } else {
    out.unit = ad::label_smoothed_ce(logits, item.unit_targets, cfg_.label_smoothing);
  }

  for (size_t t = 0; t < cfg_.aux_tasks.size(); ++t) {
    const AuxTaskSpec& task = cfg_.aux_tasks[t];
    if (t >= item.aux_inputs.size())
      throw ShapeError("train item is missing aux targets for task " + task.kind);
    const Var& tap = enc_taps[task.attach_layer - 1];
    Var embeds = ad::gather_rows(aux_decs_[t].embed, item.aux_inputs[t]);
    Var aux_states = run_decoder(aux_decs_[t], embeds, tap, cfg_.enc_heads, rng, nullptr);
    Var aux_logits = ad::add_rowvec(ad::matmul(aux_states, aux_decs_[t].head_w), aux_decs_[t].head_b);
    out.aux.push_back(ad::label_smoothed_ce(aux_logits, item.aux_targets[t], cfg_.label_smoothing));
  }

  if (cfg_.ctc_enabled && item.has_ctc) {
    const int positions = item.decoder_positions();
    if (ctc::min_frames_for_target(item.ctc_targets) > positions) {
      out.ctc_skipped = true;
      fmt::print(stderr, "[train] {}: CTC target ({} symbols) longer than {} decoder steps; skipped\n",
                 item.id, item.ctc_targets.size(), positions);
    } else {
      const Var& tap = dec_taps[cfg_.ctc_attach_layer - 1];
      Var ctc_logits = ad::add_rowvec(ad::matmul(tap, ctc_w_), ctc_b_);
      out.ctc = ad::ctc_loss_op(ad::log_softmax_rows(ctc_logits), item.ctc_targets);
    }
  }
  return out;
}

LossBreakdown S2UTModel::forward_train(const std::vector<TrainItem>& batch, uint64_t step_seed,
                                       bool training, bool accumulate_grads) {
  if (batch.empty()) throw DomainError("forward_train: empty batch");
  LossBreakdown bd;
  bd.aux_losses.resize(cfg_.aux_tasks.size());
  for (size_t t = 0; t < cfg_.aux_tasks.size(); ++t)
    bd.aux_losses[t] = {cfg_.aux_tasks[t].kind, 0.0};

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    std::mt19937_64 rng(derive_seed(step_seed, "dropout", i));
    std::mt19937_64* rng_ptr = training && cfg_.dropout > 0.0 ? &rng : nullptr;

    std::optional<ad::Tape> tape;
    if (accumulate_grads) tape.emplace();

    UttLosses losses = forward_utterance(batch[i], rng_ptr);
    bd.unit_loss += inv_b * losses.unit.scalar();
    for (size_t t = 0; t < losses.aux.size(); ++t)
      bd.aux_losses[t].second += inv_b * losses.aux[t].scalar();
    if (losses.ctc_skipped) ++bd.ctc_skipped;
    if (losses.ctc.defined()) bd.ctc_loss += inv_b * losses.ctc.scalar();

    if (accumulate_grads) {
      std::vector<Var> terms{losses.unit};
      std::vector<double> weights{inv_b};
      for (const Var& a : losses.aux) {
        terms.push_back(a);
        weights.push_back(cfg_.lambda_aux * inv_b);
      }
      if (losses.ctc.defined() && std::isfinite(losses.ctc.scalar())) {
        terms.push_back(losses.ctc);
        weights.push_back(cfg_.lambda_ctc * inv_b);
      }
      Var total = ad::weighted_sum(terms, weights);
      tape->backward(total);
    }
  }

  bd.total = bd.unit_loss + cfg_.lambda_aux * bd.aux_sum() + cfg_.lambda_ctc * bd.ctc_loss;
  return bd;
}

double S2UTModel::teacher_forced_score(const TrainItem& item) const {
  Var logits = unit_logits(item, nullptr, nullptr);
  if (cfg_.mode == Mode::stacked) {
    const int w = cfg_.unit_group_width();
    double total = 0.0;
    for (int j = 0; j < cfg_.reduction; ++j) {
      std::vector<int> col_targets(item.group_targets.size());
      for (size_t g = 0; g < item.group_targets.size(); ++g) col_targets[g] = item.group_targets[g][j];
      total += ls_ce_pick_sum(logits.v().middleCols(j * w, w), col_targets);
    }
    return total;
  }
  return ls_ce_pick_sum(logits.v(), item.unit_targets);
}

Eigen::MatrixXd S2UTModel::teacher_forced_attach_states(const TrainItem& item) const {
  std::vector<Var> dec_taps;
  unit_logits(item, nullptr, &dec_taps);
  return dec_taps[cfg_.ctc_attach_layer - 1].v();
}

DecodingContext S2UTModel::make_decoding_context(const Eigen::MatrixXd& source_frames) const {
  DecodingContext ctx;
  ctx.memory = encode(source_frames, static_cast<int>(source_frames.rows()), nullptr, nullptr).v();
  ctx.enc_len = static_cast<int>(ctx.memory.rows());
  for (const LayerParams& lp : unit_dec_.layers) {
    Eigen::MatrixXd k = ctx.memory * lp.cross_attn.wk.v();
    k.rowwise() += Eigen::RowVectorXd(lp.cross_attn.bk.v().row(0));
    Eigen::MatrixXd v = ctx.memory * lp.cross_attn.wv.v();
    v.rowwise() += Eigen::RowVectorXd(lp.cross_attn.bv.v().row(0));
    ctx.cross_k.push_back(std::move(k));
    ctx.cross_v.push_back(std::move(v));
  }
  return ctx;
}

DecodeStepOut S2UTModel::decode_step(const DecodingContext& ctx, DecoderCache& cache,
                                     const std::vector<int>& prev) const {
  const int d = cfg_.embed_dim;
  const int heads = cfg_.dec_heads;
  const int dh = d / heads;
  if (cache.layers.empty()) cache.layers.resize(cfg_.dec_layers);

  Eigen::RowVectorXd x = Eigen::RowVectorXd::Zero(d);
  for (int id : prev) x += unit_dec_.embed.v().row(id);
  x /= static_cast<double>(prev.size());
  x *= std::sqrt(static_cast<double>(d));
  x += sinusoid_positions(cache.length + 1, d).row(cache.length);

  DecodeStepOut out;
  auto attend = [&](const Eigen::RowVectorXd& q, const Eigen::MatrixXd& keys,
                    const Eigen::MatrixXd& values) {
    Eigen::RowVectorXd res(d);
    for (int h = 0; h < heads; ++h) {
      Eigen::RowVectorXd scores =
          q.segment(h * dh, dh) * keys.middleCols(h * dh, dh).transpose() / std::sqrt(double(dh));
      double mx = scores.maxCoeff();
      Eigen::RowVectorXd w = (scores.array() - mx).exp();
      w /= w.sum();
      res.segment(h * dh, dh) = w * values.middleCols(h * dh, dh);
    }
    return res;
  };

  for (int l = 0; l < cfg_.dec_layers; ++l) {
    const LayerParams& lp = unit_dec_.layers[l];
    Eigen::RowVectorXd h = ln_row(x, lp.ln1_g.v(), lp.ln1_b.v());
    Eigen::RowVectorXd q = h * lp.self_attn.wq.v() + lp.self_attn.bq.v().row(0);
    Eigen::RowVectorXd k = h * lp.self_attn.wk.v() + lp.self_attn.bk.v().row(0);
    Eigen::RowVectorXd v = h * lp.self_attn.wv.v() + lp.self_attn.bv.v().row(0);
    DecoderCache::Layer& cl = cache.layers[l];
    cl.self_k.conservativeResize(cache.length + 1, d);
    cl.self_v.conservativeResize(cache.length + 1, d);
    cl.self_k.row(cache.length) = k;
    cl.self_v.row(cache.length) = v;
    Eigen::RowVectorXd self_out = attend(q, cl.self_k, cl.self_v);
    x += self_out * lp.self_attn.wo.v() + lp.self_attn.bo.v().row(0);

    Eigen::RowVectorXd c = ln_row(x, lp.lnc_g.v(), lp.lnc_b.v());
    Eigen::RowVectorXd qc = c * lp.cross_attn.wq.v() + lp.cross_attn.bq.v().row(0);
    Eigen::RowVectorXd cross_out = attend(qc, ctx.cross_k[l], ctx.cross_v[l]);
    x += cross_out * lp.cross_attn.wo.v() + lp.cross_attn.bo.v().row(0);

    Eigen::RowVectorXd f = ln_row(x, lp.ln2_g.v(), lp.ln2_b.v());
    f = f * lp.ffn_w1.v() + lp.ffn_b1.v().row(0);
    f = f.cwiseMax(0.0);
    x += f * lp.ffn_w2.v() + lp.ffn_b2.v().row(0);

    if (cfg_.ctc_enabled && l + 1 == cfg_.ctc_attach_layer) out.attach_state = x.transpose();
  }

  Eigen::RowVectorXd final_state = ln_row(x, unit_dec_.final_ln_g.v(), unit_dec_.final_ln_b.v());
  Eigen::RowVectorXd logits = final_state * unit_dec_.head_w.v() + unit_dec_.head_b.v().row(0);

  if (cfg_.mode == Mode::stacked) {
    const int w = cfg_.unit_group_width();
    out.log_probs.resize(cfg_.reduction, w);
    for (int j = 0; j < cfg_.reduction; ++j)
      out.log_probs.row(j) = log_softmax_row(logits.segment(j * w, w));
  } else {
    out.log_probs.resize(1, logits.size());
    out.log_probs.row(0) = log_softmax_row(logits);
  }
  ++cache.length;
  return out;
}

Eigen::MatrixXd S2UTModel::ctc_log_probs(const Eigen::MatrixXd& states) const {
  if (!cfg_.ctc_enabled) throw ConfigError("ctc_log_probs: model has no CTC head");
  Eigen::MatrixXd logits = states * ctc_w_.v();
  logits.rowwise() += Eigen::RowVectorXd(ctc_b_.v().row(0));
  for (int i = 0; i < logits.rows(); ++i) logits.row(i) = log_softmax_row(logits.row(i));
  return logits;
}

}  // namespace s2st::model
