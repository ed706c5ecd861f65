#include "s2st/corpus.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <random>
#include <sstream>

#include "s2st/eval.hpp"

namespace s2st::corpus {

using json = nlohmann::json;

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::dev2: return "dev2";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "dev") return Split::dev;
  if (name == "dev2") return Split::dev2;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split: " + name);
}

RenderSpec RenderSpec::make(Lang lang, int vocab_size, int feature_dim, int frames_per_token,
                            int frame_hop_ms, double noise_sigma, uint64_t seed) {
  if (vocab_size < 2) throw ConfigError("render spec: vocabulary must have at least 2 tokens");
  if (feature_dim < 1 || frames_per_token < 1) throw ConfigError("render spec: dims must be positive");
  if (noise_sigma < 0.0) throw ConfigError("render spec: noise sigma must be >= 0");

  RenderSpec spec;
  spec.lang = lang;
  spec.vocab_size = vocab_size;
  spec.feature_dim = feature_dim;
  spec.frames_per_token = frames_per_token;
  spec.frame_hop_ms = frame_hop_ms;
  spec.noise_sigma = noise_sigma;

  // Templates are drawn once from the seed; rows are re-drawn until they are
  // well separated so nearest-template assignment is unambiguous.
  std::mt19937_64 rng(derive_seed(seed, lang == Lang::source ? "templates/src" : "templates/tgt"));
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  const double min_dist = 0.5;
  spec.templates.resize(vocab_size, feature_dim);
  for (int v = 0; v < vocab_size; ++v) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) throw ConfigError("render spec: cannot place separated templates; increase feature_dim");
      for (int d = 0; d < feature_dim; ++d) spec.templates(v, d) = unif(rng);
      bool ok = true;
      for (int u = 0; u < v && ok; ++u) {
        if ((spec.templates.row(v) - spec.templates.row(u)).norm() < min_dist) ok = false;
      }
      if (ok) break;
    }
  }
  return spec;
}

void CorpusConfig::validate() const {
  if (vocab_src < 2 || vocab_tgt < 2) throw ConfigError("corpus config: vocabularies need V >= 2");
  if (vocab_tgt < vocab_src) throw ConfigError("corpus config: toy dictionary needs vocab_tgt >= vocab_src");
  if (n_train < 1 || n_dev < 1 || n_dev2 < 1 || n_test < 1) throw ConfigError("corpus config: empty split");
  if (len_min < 1 || len_max < len_min) throw ConfigError("corpus config: bad sentence length range");
  if (dim_src < 1 || dim_tgt < 1) throw ConfigError("corpus config: feature dims must be positive");
  if (frames_per_token_src < 1 || frames_per_token_tgt < 1)
    throw ConfigError("corpus config: frames per token must be positive");
  if (noise_sigma_src < 0 || noise_sigma_tgt < 0) throw ConfigError("corpus config: noise sigma must be >= 0");
}

int CorpusConfig::split_size(Split s) const {
  switch (s) {
    case Split::train: return n_train;
    case Split::dev: return n_dev;
    case Split::dev2: return n_dev2;
    case Split::test: return n_test;
  }
  return 0;
}

RenderSpec CorpusConfig::render_spec(Lang lang) const {
  if (lang == Lang::source) {
    return RenderSpec::make(lang, vocab_src, dim_src, frames_per_token_src, hop_ms_src,
                            noise_sigma_src, seed);
  }
  return RenderSpec::make(lang, vocab_tgt, dim_tgt, frames_per_token_tgt, hop_ms_tgt,
                          noise_sigma_tgt, seed);
}

ToyTranslator::ToyTranslator(int vocab_src, int vocab_tgt, uint64_t seed) {
  if (vocab_tgt < vocab_src) throw ConfigError("toy translator: needs vocab_tgt >= vocab_src for a bijection");
  std::vector<int> perm(vocab_tgt);
  for (int i = 0; i < vocab_tgt; ++i) perm[i] = i;
  std::mt19937_64 rng(derive_seed(seed, "dictionary"));
  std::shuffle(perm.begin(), perm.end(), rng);
  dict_.assign(perm.begin(), perm.begin() + vocab_src);
  inverse_.assign(vocab_tgt, -1);
  for (int i = 0; i < vocab_src; ++i) inverse_[dict_[i]] = i;
}

int ToyTranslator::map_token(int src_token) const {
  if (src_token < 0 || src_token >= static_cast<int>(dict_.size()))
    throw VocabError("toy translator: source token out of range: " + std::to_string(src_token));
  return dict_[src_token];
}

TokenSequence ToyTranslator::translate(const TokenSequence& source) const {
  TokenSequence out;
  out.lang = Lang::target;
  out.tokens.reserve(source.tokens.size());
  for (auto it = source.tokens.rbegin(); it != source.tokens.rend(); ++it)
    out.tokens.push_back(map_token(*it));
  return out;
}

TokenSequence ToyTranslator::invert(const TokenSequence& target) const {
  TokenSequence out;
  out.lang = Lang::source;
  out.tokens.reserve(target.tokens.size());
  for (auto it = target.tokens.rbegin(); it != target.tokens.rend(); ++it) {
    int t = *it;
    if (t < 0 || t >= static_cast<int>(inverse_.size()) || inverse_[t] < 0)
      throw VocabError("toy translator: target token not in dictionary image: " + std::to_string(t));
    out.tokens.push_back(inverse_[t]);
  }
  return out;
}

std::string token_name(int id) {
  if (id < 0) throw VocabError("token id must be non-negative");
  std::string name;
  int n = id + 1;  // bijective base-26
  while (n > 0) {
    --n;
    name.push_back(static_cast<char>('a' + n % 26));
    n /= 26;
  }
  std::reverse(name.begin(), name.end());
  return name;
}

int token_from_name(const std::string& name) {
  if (name.empty()) throw VocabError("empty token name");
  long n = 0;
  for (char c : name) {
    if (c < 'a' || c > 'z') throw VocabError("bad token name: " + name);
    n = n * 26 + (c - 'a' + 1);
  }
  return static_cast<int>(n - 1);
}

std::string text_of(const TokenSequence& seq) {
  std::string out;
  for (size_t i = 0; i < seq.tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += token_name(seq.tokens[i]);
  }
  return out;
}

std::vector<int> CharVocab::encode_text(const TokenSequence& seq, bool with_separators) {
  std::vector<int> out;
  for (size_t i = 0; i < seq.tokens.size(); ++i) {
    if (i && with_separators) out.push_back(kSpace);
    for (char c : token_name(seq.tokens[i])) out.push_back(c - 'a');
  }
  return out;
}

std::string CharVocab::letters_to_text(const std::vector<int>& letters) {
  std::string out;
  for (size_t i = 0; i < letters.size(); ++i) {
    if (i) out.push_back(' ');
    int c = letters[i];
    if (c < 0 || c >= kLetters) throw VocabError("letter id out of range: " + std::to_string(c));
    out.push_back(static_cast<char>('a' + c));
  }
  return out;
}

uint64_t utterance_render_seed(uint64_t corpus_seed, const std::string& id, Lang lang) {
  uint64_t h = derive_seed(corpus_seed, lang == Lang::source ? "render/src" : "render/tgt");
  return hash_mix(h, id);
}

FrameMatrix render_frames(const TokenSequence& text, const RenderSpec& spec, uint64_t seed) {
  if (text.tokens.empty()) throw DomainError("render_frames: empty token sequence");
  for (int t : text.tokens) {
    if (t < 0 || t >= spec.vocab_size)
      throw VocabError("render_frames: token " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(spec.vocab_size));
  }
  const int f = spec.frames_per_token;
  const int T = f * static_cast<int>(text.tokens.size());
  FrameMatrix out;
  out.frame_hop_ms = spec.frame_hop_ms;
  out.frames.resize(T, spec.feature_dim);
  for (int i = 0; i < static_cast<int>(text.tokens.size()); ++i) {
    for (int j = 0; j < f; ++j) out.frames.row(i * f + j) = spec.templates.row(text.tokens[i]);
  }
  if (spec.noise_sigma > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (int r = 0; r < T; ++r) {
      for (int c = 0; c < spec.feature_dim; ++c) out.frames(r, c) += noise(rng);
    }
  }
  return out;
}

namespace {

TokenSequence sample_sentence(int vocab, int len_min, int len_max, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len_dist(len_min, len_max);
  std::uniform_int_distribution<int> tok_dist(0, vocab - 1);
  TokenSequence seq;
  seq.lang = Lang::source;
  int len = len_dist(rng);
  seq.tokens.reserve(len);
  int prev = -1;
  for (int i = 0; i < len; ++i) {
    // No adjacent duplicates: keeps every unit run exactly one token long,
    // which the duration targets and the CTC length budget rely on.
    int t = tok_dist(rng);
    while (t == prev) t = tok_dist(rng);
    seq.tokens.push_back(t);
    prev = t;
  }
  return seq;
}

}  // namespace

Corpus generate_corpus(const CorpusConfig& config, Split split) {
  config.validate();
  Corpus corpus;
  corpus.config = config;
  corpus.split = split;

  ToyTranslator translator(config.vocab_src, config.vocab_tgt, config.seed);
  RenderSpec src_spec = config.render_spec(Lang::source);
  RenderSpec tgt_spec = config.render_spec(Lang::target);

  std::mt19937_64 rng(derive_seed(config.seed, "sample", static_cast<uint64_t>(split)));
  const int n = config.split_size(split);
  corpus.utterances.reserve(n);
  for (int i = 0; i < n; ++i) {
    Utterance utt;
    utt.id = fmt::format("{}-{:05d}", split_name(split), i);
    utt.source_text = sample_sentence(config.vocab_src, config.len_min, config.len_max, rng);
    utt.target_text = translator.translate(utt.source_text);
    utt.source_frames = render_frames(utt.source_text, src_spec,
                                      utterance_render_seed(config.seed, utt.id, Lang::source));
    utt.target_frames = render_frames(utt.target_text, tgt_spec,
                                      utterance_render_seed(config.seed, utt.id, Lang::target));
    corpus.utterances.push_back(std::move(utt));
  }
  return corpus;
}

Corpus filter_corpus(const Corpus& corpus,
                     const std::function<std::string(const Utterance&)>& recognize,
                     double wer_threshold_percent) {
  if (wer_threshold_percent < 0.0 || wer_threshold_percent > 100.0)
    throw ConfigError("filter_corpus: threshold must be in [0, 100]");
  Corpus out;
  out.config = corpus.config;
  out.split = corpus.split;
  for (const Utterance& utt : corpus.utterances) {
    double wer_percent = 100.0;
    try {
      std::string hyp = recognize(utt);
      wer_percent = 100.0 * eval::wer(hyp, text_of(utt.target_text));
    } catch (const std::exception& e) {
      fmt::print(stderr, "[filter] recognizer failed on {}: {} (counted as WER 100)\n", utt.id,
                 e.what());
    }
    if (wer_percent <= wer_threshold_percent) out.utterances.push_back(utt);
  }
  return out;
}

void save_manifest(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest: " + path);
  for (const Utterance& utt : corpus.utterances) {
    out << utt.id << '\t';
    for (size_t i = 0; i < utt.source_text.tokens.size(); ++i) {
      if (i) out << ' ';
      out << utt.source_text.tokens[i];
    }
    out << '\t';
    for (size_t i = 0; i < utt.target_text.tokens.size(); ++i) {
      if (i) out << ' ';
      out << utt.target_text.tokens[i];
    }
    out << '\n';
  }

  const CorpusConfig& c = corpus.config;
  json side;
  side["format"] = "s2st-manifest-v1";
  side["split"] = split_name(corpus.split);
  side["vocab_src"] = c.vocab_src;
  side["vocab_tgt"] = c.vocab_tgt;
  side["n_train"] = c.n_train;
  side["n_dev"] = c.n_dev;
  side["n_dev2"] = c.n_dev2;
  side["n_test"] = c.n_test;
  side["len_min"] = c.len_min;
  side["len_max"] = c.len_max;
  side["dim_src"] = c.dim_src;
  side["dim_tgt"] = c.dim_tgt;
  side["frames_per_token_src"] = c.frames_per_token_src;
  side["frames_per_token_tgt"] = c.frames_per_token_tgt;
  side["hop_ms_src"] = c.hop_ms_src;
  side["hop_ms_tgt"] = c.hop_ms_tgt;
  side["noise_sigma_src"] = c.noise_sigma_src;
  side["noise_sigma_tgt"] = c.noise_sigma_tgt;
  side["seed"] = c.seed;
  std::ofstream sidecar(path + ".json");
  if (!sidecar) throw DataError("cannot write manifest sidecar: " + path + ".json");
  sidecar << side.dump(2) << '\n';
}

namespace {

std::vector<int> parse_id_list(const std::string& field, int lineno) {
  std::vector<int> out;
  std::istringstream in(field);
  std::string tok;
  while (in >> tok) {
    try {
      size_t pos = 0;
      int v = std::stoi(tok, &pos);
      if (pos != tok.size()) throw std::invalid_argument(tok);
      out.push_back(v);
    } catch (const std::exception&) {
      throw DataError(fmt::format("manifest line {}: bad token id '{}'", lineno, tok));
    }
  }
  if (out.empty()) throw DataError(fmt::format("manifest line {}: empty token list", lineno));
  return out;
}

}  // namespace

Corpus load_manifest(const std::string& path) {
  std::ifstream sidecar(path + ".json");
  if (!sidecar) throw DataError("cannot open manifest sidecar: " + path + ".json");
  json side;
  try {
    sidecar >> side;
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest sidecar: ") + e.what());
  }
  if (side.value("format", "") != "s2st-manifest-v1")
    throw DataError("manifest sidecar: unknown format tag");

  CorpusConfig c;
  c.vocab_src = side.at("vocab_src").get<int>();
  c.vocab_tgt = side.at("vocab_tgt").get<int>();
  c.n_train = side.at("n_train").get<int>();
  c.n_dev = side.at("n_dev").get<int>();
  c.n_dev2 = side.at("n_dev2").get<int>();
  c.n_test = side.at("n_test").get<int>();
  c.len_min = side.at("len_min").get<int>();
  c.len_max = side.at("len_max").get<int>();
  c.dim_src = side.at("dim_src").get<int>();
  c.dim_tgt = side.at("dim_tgt").get<int>();
  c.frames_per_token_src = side.at("frames_per_token_src").get<int>();
  c.frames_per_token_tgt = side.at("frames_per_token_tgt").get<int>();
  c.hop_ms_src = side.at("hop_ms_src").get<int>();
  c.hop_ms_tgt = side.at("hop_ms_tgt").get<int>();
  c.noise_sigma_src = side.at("noise_sigma_src").get<double>();
  c.noise_sigma_tgt = side.at("noise_sigma_tgt").get<double>();
  c.seed = side.at("seed").get<uint64_t>();
  c.validate();

  Corpus corpus;
  corpus.config = c;
  corpus.split = split_from_name(side.at("split").get<std::string>());

  RenderSpec src_spec = c.render_spec(Lang::source);
  RenderSpec tgt_spec = c.render_spec(Lang::target);

  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path);
  std::string line;
  int lineno = 0;
  std::vector<std::string> seen_ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
      size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 3)
      throw DataError(fmt::format("manifest line {}: expected 3 tab-separated fields, got {}",
                                  lineno, fields.size()));
    Utterance utt;
    utt.id = fields[0];
    if (utt.id.empty()) throw DataError(fmt::format("manifest line {}: empty id", lineno));
    if (std::find(seen_ids.begin(), seen_ids.end(), utt.id) != seen_ids.end())
      throw DataError(fmt::format("manifest line {}: duplicate id '{}'", lineno, utt.id));
    seen_ids.push_back(utt.id);

    utt.source_text = {parse_id_list(fields[1], lineno), Lang::source};
    utt.target_text = {parse_id_list(fields[2], lineno), Lang::target};
    for (int t : utt.source_text.tokens) {
      if (t < 0 || t >= c.vocab_src)
        throw DataError(fmt::format("manifest line {}: source token {} out of range", lineno, t));
    }
    for (int t : utt.target_text.tokens) {
      if (t < 0 || t >= c.vocab_tgt)
        throw DataError(fmt::format("manifest line {}: target token {} out of range", lineno, t));
    }
    utt.source_frames =
        render_frames(utt.source_text, src_spec, utterance_render_seed(c.seed, utt.id, Lang::source));
    utt.target_frames =
        render_frames(utt.target_text, tgt_spec, utterance_render_seed(c.seed, utt.id, Lang::target));
    corpus.utterances.push_back(std::move(utt));
  }
  if (corpus.utterances.empty()) throw DataError("manifest is empty: " + path);
  return corpus;
}

}  // namespace s2st::corpus
