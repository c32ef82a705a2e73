#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmasr/core/seed.hpp"
#include "mmasr/corpus/manifest.hpp"
#include "mmasr/corpus/types.hpp"

// Deterministic synthetic corpus for desk-scale experiments.
//
// Every word owns a fixed acoustic signature (a short run of feature frames);
// every content word also owns a fixed visual signature. Images plant one
// proposal per content word they depict, and fill the remaining proposals
// with attenuated signatures of content words they do not depict. Captions
// fill templates from the depicted words, so a masked content word can only
// be recovered by finding its proposal.

namespace mmasr::corpus {

struct SynthConfig {
  std::size_t n_nouns = 20;
  std::size_t n_colors = 10;
  std::size_t n_cardinals = 10;
  std::vector<std::string> templates = {
      "a {color} {noun} is playing on the grass",  "{cardinal} {color} {noun} are near the water",
      "the {noun} is in the street",               "{cardinal} {noun} are playing in the water",
      "a {color} {noun} near the street",          "the {cardinal} {color} {noun} are on the grass",
      "{cardinal} {color} {noun} in the water",    "the {color} {noun} is with {cardinal}",
  };
  std::size_t train_utterances = 200;
  std::size_t dev_utterances = 50;
  std::size_t test_utterances = 50;
  std::size_t captions_per_image = 5;

  std::size_t feature_dim = kDefaultFeatureDim;
  std::size_t min_word_frames = 8;
  std::size_t max_word_frames = 20;
  double signature_spread = 0.5;  // per-frame variation inside a word signature
  double acoustic_noise = 0.1;    // additive noise on utterance features

  std::size_t visual_dim = kDefaultVisualDim;
  std::size_t n_proposals = kDefaultProposals;
  double visual_noise = 3.0;
  double distractor_gain = 0.3;
  double image_width = 640;
  double image_height = 480;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthConfig, n_nouns, n_colors, n_cardinals, templates,
                                                train_utterances, dev_utterances, test_utterances,
                                                captions_per_image, feature_dim, min_word_frames, max_word_frames,
                                                signature_spread, acoustic_noise, visual_dim, n_proposals,
                                                visual_noise, distractor_gain, image_width, image_height)

struct ProposalOrigin {
  std::string word;
  bool planted = false;
};

struct SynthLexicon {
  std::map<std::string, FeatureMatrix> acoustic;  // word -> frames x feature_dim
  std::map<std::string, FeatureMatrix> visual;    // content word -> 1 x visual_dim
  std::map<std::string, std::string> category_of;  // content word -> category name
  std::map<std::string, std::vector<ProposalOrigin>> proposals;  // image id -> origin per proposal
  std::map<std::string, std::vector<std::string>> depicted;      // image id -> planted words
};

struct SynthCorpus {
  Corpus train, dev, test;
  std::vector<WordCategoryList> categories;  // noun, color, cardinal, function
  SynthLexicon lexicon;
};

namespace detail {

inline const std::vector<std::string>& base_names(const std::string& category) {
  static const std::map<std::string, std::vector<std::string>> names = {
      {"noun", {"dog", "cat", "horse", "bird", "ball", "boy", "girl", "man", "woman", "car",
                "bike", "boat", "tree", "kite", "frisbee", "sheep", "cow", "bench", "shirt", "hat"}},
      {"color", {"red", "blue", "green", "yellow", "black", "white", "brown", "pink", "orange", "purple"}},
      {"cardinal", {"one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"}},
  };
  return names.at(category);
}

inline std::vector<std::string> category_words(const std::string& category, std::size_t n) {
  const auto& base = base_names(category);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(i < base.size() ? base[i] : category + std::to_string(i + 1));
  }
  return out;
}

struct TemplateToken {
  std::string text;      // literal word or category name
  bool is_slot = false;
};

inline std::vector<TemplateToken> parse_template(const std::string& tmpl) {
  std::vector<TemplateToken> out;
  std::istringstream is(tmpl);
  std::string tok;
  while (is >> tok) {
    if (tok.size() > 2 && tok.front() == '{' && tok.back() == '}') {
      out.push_back({tok.substr(1, tok.size() - 2), true});
    } else {
      out.push_back({lowercase(tok), false});
    }
  }
  return out;
}

inline double box_iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

}  // namespace detail

inline const std::vector<std::string>& synth_category_names() {
  static const std::vector<std::string> names = {"noun", "color", "cardinal"};
  return names;
}

class SyntheticGenerator {
 public:
  SyntheticGenerator(SynthConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
    validate();
    build_lexicon();
  }

  SynthCorpus generate() {
    SynthCorpus out;
    out.train = make_split("train", config_.train_utterances);
    out.dev = make_split("dev", config_.dev_utterances);
    out.test = make_split("test", config_.test_utterances);
    for (const auto& cat : synth_category_names()) {
      WordCategoryList list{cat, {}};
      for (const auto& w : words_by_category_.at(cat)) list.words.insert(w);
      out.categories.push_back(list);
    }
    WordCategoryList fn{"function", {function_words_.begin(), function_words_.end()}};
    out.categories.push_back(fn);
    out.lexicon = lexicon_;
    return out;
  }

  const SynthConfig& config() const { return config_; }

 private:
  void validate() {
    if (config_.templates.empty()) throw ConfigError("synth: no templates");
    if (config_.feature_dim == 0 || config_.visual_dim == 0) throw ConfigError("synth: feature dimensions must be positive");
    if (config_.min_word_frames == 0 || config_.min_word_frames > config_.max_word_frames) {
      throw ConfigError("synth: word frame range is empty");
    }
    if (config_.captions_per_image == 0) throw ConfigError("synth: captions_per_image must be positive");
    const std::map<std::string, std::size_t> sizes = {
        {"noun", config_.n_nouns}, {"color", config_.n_colors}, {"cardinal", config_.n_cardinals}};
    for (const auto& [cat, n] : sizes) {
      if (n == 0) throw ConfigError("synth: every image depicts a " + cat + " but the vocabulary has none");
    }
    for (const auto& t : config_.templates) {
      std::map<std::string, std::size_t> used;
      for (const auto& tok : detail::parse_template(t)) {
        if (!tok.is_slot) continue;
        auto it = sizes.find(tok.text);
        if (it == sizes.end()) throw ConfigError("synth: unknown slot {" + tok.text + "} in template: " + t);
        if (++used[tok.text] > 1) throw ConfigError("synth: template repeats slot {" + tok.text + "}: " + t);
        if (it->second == 0) {
          throw ConfigError("synth: template needs a " + tok.text + " but the vocabulary has none: " + t);
        }
      }
    }
    if (config_.n_proposals < synth_category_names().size()) {
      throw ConfigError("synth: an image depicts " + std::to_string(synth_category_names().size()) +
                        " content words but only " + std::to_string(config_.n_proposals) + " proposals are allowed");
    }
    if (!(config_.distractor_gain >= 0.0) || !(config_.visual_noise >= 0.0) || !(config_.acoustic_noise >= 0.0)) {
      throw ConfigError("synth: gains and noise levels must be non-negative");
    }
  }

  void build_lexicon() {
    std::mt19937_64 rng(derive_seed(seed_, "synth/lexicon"));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> frames(config_.min_word_frames, config_.max_word_frames);

    const std::map<std::string, std::size_t> sizes = {
        {"noun", config_.n_nouns}, {"color", config_.n_colors}, {"cardinal", config_.n_cardinals}};
    for (const auto& cat : synth_category_names()) {
      words_by_category_[cat] = detail::category_words(cat, sizes.at(cat));
      for (const auto& w : words_by_category_[cat]) {
        lexicon_.category_of[w] = cat;
        content_words_.push_back(w);
      }
    }
    std::set<std::string> fn;
    for (const auto& t : config_.templates) {
      for (const auto& tok : detail::parse_template(t)) {
        if (!tok.is_slot) fn.insert(tok.text);
      }
    }
    for (const auto& w : fn) {
      if (lexicon_.category_of.count(w)) throw ConfigError("synth: template literal '" + w + "' is also a content word");
    }
    function_words_.assign(fn.begin(), fn.end());

    // Signatures are drawn in a fixed word order so they do not depend on map layout.
    std::vector<std::string> all = content_words_;
    all.insert(all.end(), function_words_.begin(), function_words_.end());
    for (const auto& w : all) {
      const auto len = frames(rng);
      FeatureMatrix sig(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(config_.feature_dim));
      std::vector<double> mean(config_.feature_dim);
      for (auto& m : mean) m = normal(rng);
      for (Eigen::Index r = 0; r < sig.rows(); ++r) {
        for (Eigen::Index c = 0; c < sig.cols(); ++c) {
          sig(r, c) = static_cast<float>(mean[static_cast<std::size_t>(c)] + config_.signature_spread * normal(rng));
        }
      }
      lexicon_.acoustic[w] = std::move(sig);
    }
    for (const auto& w : content_words_) {
      FeatureMatrix v(1, static_cast<Eigen::Index>(config_.visual_dim));
      for (Eigen::Index c = 0; c < v.cols(); ++c) v(0, c) = static_cast<float>(normal(rng));
      lexicon_.visual[w] = std::move(v);
    }
  }

  Box random_box(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> wdist(64.0, std::min(256.0, config_.image_width));
    std::uniform_real_distribution<double> hdist(64.0, std::min(192.0, config_.image_height));
    const double w = std::round(wdist(rng)), h = std::round(hdist(rng));
    std::uniform_real_distribution<double> xdist(0.0, std::max(0.0, config_.image_width - w));
    std::uniform_real_distribution<double> ydist(0.0, std::max(0.0, config_.image_height - h));
    const double x = std::round(xdist(rng)), y = std::round(ydist(rng));
    return {x, y, x + w, y + h};
  }

  // A box overlapping every box in `avoid` by IoU <= 0.3 when one can be found.
  Box separated_box(std::mt19937_64& rng, const std::vector<Box>& avoid) const {
    Box b = random_box(rng);
    for (int attempt = 0; attempt < 200; ++attempt) {
      bool ok = true;
      for (const auto& a : avoid) ok = ok && detail::box_iou(a, b) <= 0.3;
      if (ok) return b;
      b = random_box(rng);
    }
    return b;
  }

  Corpus make_split(const std::string& split, std::size_t n_utterances) {
    Corpus corpus;
    std::mt19937_64 rng(derive_seed(seed_, "synth/split/" + split));
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t n_images = (n_utterances + config_.captions_per_image - 1) / config_.captions_per_image;
    std::size_t utt_index = 0;

    for (std::size_t img = 0; img < n_images; ++img) {
      char name[64];
      std::snprintf(name, sizeof(name), "%s-img-%04zu", split.c_str(), img);
      const std::string image_id = name;

      // Depicted words: one per category.
      std::map<std::string, std::string> depicted;
      for (const auto& cat : synth_category_names()) {
        const auto& pool = words_by_category_.at(cat);
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        depicted[cat] = pool[pick(rng)];
      }
      std::vector<std::string> planted_words;
      for (const auto& cat : synth_category_names()) planted_words.push_back(depicted[cat]);

      std::vector<std::string> others;
      for (const auto& w : content_words_) {
        if (std::find(planted_words.begin(), planted_words.end(), w) == planted_words.end()) others.push_back(w);
      }
      if (others.empty() && config_.n_proposals > planted_words.size()) {
        throw ConfigError("synth: no undepicted content words left to fill distractor proposals");
      }
      std::shuffle(others.begin(), others.end(), rng);

      std::vector<ProposalOrigin> origins;
      for (const auto& w : planted_words) origins.push_back({w, true});
      for (std::size_t k = 0; origins.size() < config_.n_proposals; ++k) {
        origins.push_back({others[k % others.size()], false});
      }
      std::shuffle(origins.begin(), origins.end(), rng);

      auto visual = std::make_shared<VisualContext>();
      visual->image_id = image_id;
      visual->proposals = FeatureMatrix(static_cast<Eigen::Index>(config_.n_proposals),
                                        static_cast<Eigen::Index>(config_.visual_dim));
      std::vector<Box> planted_boxes;
      std::map<std::string, Box> box_of;
      visual->boxes.resize(config_.n_proposals);
      for (std::size_t j = 0; j < origins.size(); ++j) {
        if (!origins[j].planted) continue;
        visual->boxes[j] = separated_box(rng, planted_boxes);
        planted_boxes.push_back(visual->boxes[j]);
        box_of[origins[j].word] = visual->boxes[j];
      }
      for (std::size_t j = 0; j < origins.size(); ++j) {
        if (!origins[j].planted) visual->boxes[j] = separated_box(rng, planted_boxes);
      }
      for (std::size_t j = 0; j < origins.size(); ++j) {
        const auto& sig = lexicon_.visual.at(origins[j].word);
        const double gain = origins[j].planted ? 1.0 : config_.distractor_gain;
        for (Eigen::Index c = 0; c < sig.cols(); ++c) {
          visual->proposals(static_cast<Eigen::Index>(j), c) =
              static_cast<float>(gain * sig(0, c) + config_.visual_noise * normal(rng));
        }
      }
      visual->global_feature = visual->proposals.colwise().mean();
      corpus.images[image_id] = visual;
      lexicon_.proposals[image_id] = origins;
      lexicon_.depicted[image_id] = planted_words;

      for (std::size_t cap = 0; cap < config_.captions_per_image && utt_index < n_utterances; ++cap, ++utt_index) {
        std::uniform_int_distribution<std::size_t> pick_t(0, config_.templates.size() - 1);
        const auto tokens = detail::parse_template(config_.templates[pick_t(rng)]);
        std::snprintf(name, sizeof(name), "%s-%05zu", split.c_str(), utt_index);
        Utterance u;
        u.id = name;
        GroundTruthAnnotation ann;
        ann.utterance_id = u.id;
        for (const auto& tok : tokens) {
          if (tok.is_slot) {
            const auto& w = depicted.at(tok.text);
            ann.entries.push_back({{u.words.size()}, box_of.at(w)});
            u.words.push_back(w);
          } else {
            u.words.push_back(tok.text);
          }
        }
        std::size_t total = 0;
        for (const auto& w : u.words) total += static_cast<std::size_t>(lexicon_.acoustic.at(w).rows());
        u.features = FeatureMatrix(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(config_.feature_dim));
        std::size_t frame = 0;
        for (const auto& w : u.words) {
          const auto& sig = lexicon_.acoustic.at(w);
          u.features.middleRows(static_cast<Eigen::Index>(frame), sig.rows()) = sig;
          u.alignments.push_back({static_cast<double>(frame) * kFrameHopSec,
                                  static_cast<double>(frame + static_cast<std::size_t>(sig.rows())) * kFrameHopSec});
          frame += static_cast<std::size_t>(sig.rows());
        }
        if (config_.acoustic_noise > 0.0) {
          for (Eigen::Index i = 0; i < u.features.size(); ++i) {
            u.features.data()[i] += static_cast<float>(config_.acoustic_noise * normal(rng));
          }
        }
        corpus.links[u.id] = image_id;
        corpus.annotations[u.id] = std::move(ann);
        corpus.utterances.push_back(std::move(u));
      }
    }
    return corpus;
  }

  SynthConfig config_;
  std::uint64_t seed_;
  SynthLexicon lexicon_;
  std::map<std::string, std::vector<std::string>> words_by_category_;
  std::vector<std::string> content_words_;
  std::vector<std::string> function_words_;
};

inline SynthCorpus synthesize_corpus(const SynthConfig& config, std::uint64_t seed) {
  return SyntheticGenerator(config, seed).generate();
}

/// Writes train/, dev/, test/ manifests and categories/<name>.txt.
inline void write_synthetic(const SynthCorpus& synth, const std::filesystem::path& out) {
  save_manifest(synth.train, out / "train");
  save_manifest(synth.dev, out / "dev");
  save_manifest(synth.test, out / "test");
  std::filesystem::create_directories(out / "categories");
  for (const auto& cat : synth.categories) write_category_list(out / "categories" / (cat.name + ".txt"), cat);
}

}  // namespace mmasr::corpus
