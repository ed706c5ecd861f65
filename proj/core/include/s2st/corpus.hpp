#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "s2st/common.hpp"

namespace s2st::corpus {

enum class Lang { source, target };
enum class Split { train, dev, dev2, test };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

/// A token-id sentence in one of the two toy languages.
struct TokenSequence {
  std::vector<int> tokens;
  Lang lang{Lang::source};

  bool operator==(const TokenSequence&) const = default;
};

/// T x D real feature matrix plus its frame hop.
struct FrameMatrix {
  Eigen::MatrixXd frames;  // T x D
  int frame_hop_ms{10};

  int num_frames() const { return static_cast<int>(frames.rows()); }
  int dim() const { return static_cast<int>(frames.cols()); }
};

/// Deterministic per-token rendering templates for one language.
///
/// Token i maps to a fixed D-dim template row; rendering emits
/// frames_per_token copies of it per token plus optional Gaussian noise.
struct RenderSpec {
  Lang lang{Lang::source};
  int vocab_size{0};
  int feature_dim{0};
  int frames_per_token{0};
  int frame_hop_ms{10};
  double noise_sigma{0.0};
  Eigen::MatrixXd templates;  // V x D

  static RenderSpec make(Lang lang, int vocab_size, int feature_dim, int frames_per_token,
                         int frame_hop_ms, double noise_sigma, uint64_t seed);
};

struct CorpusConfig {
  int vocab_src = 20;
  int vocab_tgt = 20;
  int n_train = 2000;
  int n_dev = 200;
  int n_dev2 = 200;
  int n_test = 200;
  int len_min = 3;
  int len_max = 10;
  int dim_src = 16;
  int dim_tgt = 8;
  int frames_per_token_src = 8;
  int frames_per_token_tgt = 4;
  int hop_ms_src = 10;
  int hop_ms_tgt = 20;
  double noise_sigma_src = 0.0;
  double noise_sigma_tgt = 0.0;
  uint64_t seed = 7;

  void validate() const;
  int split_size(Split s) const;
  RenderSpec render_spec(Lang lang) const;

  bool operator==(const CorpusConfig&) const = default;
};

struct Utterance {
  std::string id;
  TokenSequence source_text;
  TokenSequence target_text;
  FrameMatrix source_frames;
  FrameMatrix target_frames;
  std::vector<int> target_units;  // filled by target preparation; empty until then
};

/// One split of the synthetic parallel corpus. Immutable after construction.
struct Corpus {
  CorpusConfig config;
  Split split{Split::train};
  std::vector<Utterance> utterances;

  size_t size() const { return utterances.size(); }
};

/// Token-wise dictionary map composed with full sequence reversal.
/// The dictionary is a seed-derived permutation of the target vocabulary,
/// so the map is a bijection on fixed-length sequences.
class ToyTranslator {
 public:
  ToyTranslator(int vocab_src, int vocab_tgt, uint64_t seed);

  TokenSequence translate(const TokenSequence& source) const;
  TokenSequence invert(const TokenSequence& target) const;
  int map_token(int src_token) const;

 private:
  std::vector<int> dict_;
  std::vector<int> inverse_;
};

// Token text form. Ids render as bijective base-26 words ("a".."z", "aa", ...).
std::string token_name(int id);
int token_from_name(const std::string& name);
std::string text_of(const TokenSequence& seq);

/// Character inventory shared by the auxiliary decoders and the CTC head:
/// letters 'a'..'z' plus word separator, EOS and BOS symbols.
struct CharVocab {
  static constexpr int kLetters = 26;
  static constexpr int kSpace = 26;
  static constexpr int kEos = 27;
  static constexpr int kBos = 28;
  static constexpr int kSize = 29;

  // Characters of the token-name text, with or without word separators.
  static std::vector<int> encode_text(const TokenSequence& seq, bool with_separators);
  // Inverse of the separator-free encoding: each letter is one toy word.
  static std::string letters_to_text(const std::vector<int>& letters);
};

Corpus generate_corpus(const CorpusConfig& config, Split split);

FrameMatrix render_frames(const TokenSequence& text, const RenderSpec& spec, uint64_t seed);

// Seed for one utterance's rendering; stable under filtering and reordering.
uint64_t utterance_render_seed(uint64_t corpus_seed, const std::string& id, Lang lang);

/// Keeps exactly the utterances whose recognized-vs-reference WER is within
/// `wer_threshold_percent`. A recognizer exception counts as WER 100 and is
/// logged rather than propagated.
Corpus filter_corpus(const Corpus& corpus,
                     const std::function<std::string(const Utterance&)>& recognize,
                     double wer_threshold_percent);

// Manifest I/O. Records are one line per utterance (id, source ids, target
// ids, tab-separated); the render config and seed live in a JSON sidecar at
// path + ".json". Frames are re-rendered from config + seed on load.
void save_manifest(const Corpus& corpus, const std::string& path);
Corpus load_manifest(const std::string& path);

}  // namespace s2st::corpus
