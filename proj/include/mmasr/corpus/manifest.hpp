#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmasr/corpus/feature_io.hpp"
#include "mmasr/corpus/types.hpp"

// One directory per split:
//   utterances.jsonl   {id, words, alignments: [[start, end], ...], features}
//   images.jsonl       {image_id, global_feature, boxes: [[x1,y1,x2,y2], ...], proposal_features}
//   annotations.jsonl  {utterance_id, entries: [{word_indices, box}]}
//   links.jsonl        {utterance_id, image_id}
//   masks.jsonl        {utterance_id, base_id, probability, masked_word_indices, spans}  (masked datasets)
// Feature paths are relative to the split directory.

namespace mmasr::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

namespace detail {

inline void for_each_jsonl(const fs::path& path, bool required,
                           const std::function<void(const json&, std::size_t)>& fn) {
  if (!fs::exists(path)) {
    if (required) throw IoError("missing manifest file " + path.string());
    return;
  }
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw MalformedRecordError(path.filename().string() + ":" + std::to_string(lineno), e.what());
    }
    fn(rec, lineno);
  }
}

inline Box box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw std::invalid_argument("box must be [x1, y1, x2, y2]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline json box_to_json(const Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

inline std::string record_name(const json& rec, const char* key, const fs::path& file, std::size_t lineno) {
  if (rec.is_object() && rec.contains(key) && rec[key].is_string()) return rec[key].get<std::string>();
  return file.filename().string() + ":" + std::to_string(lineno);
}

// Runs `parse`, converting JSON access failures into a record-level error.
template <typename Fn>
void parse_record(const std::string& name, Fn&& parse) {
  try {
    parse();
  } catch (const ValidationError&) {
    throw;
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw MalformedRecordError(name, e.what());
  }
}

}  // namespace detail

inline void validate_utterance(const Utterance& u) {
  if (u.alignments.size() != u.words.size()) {
    throw MalformedRecordError(u.id, std::to_string(u.alignments.size()) + " alignments for " +
                                         std::to_string(u.words.size()) + " words");
  }
  double prev_start = 0.0;
  for (std::size_t i = 0; i < u.alignments.size(); ++i) {
    const auto& a = u.alignments[i];
    if (a.start_sec < 0.0 || a.end_sec < a.start_sec) {
      throw MalformedRecordError(u.id, "ill-formed alignment span for word " + std::to_string(i));
    }
    if (a.start_sec < prev_start) throw MalformedRecordError(u.id, "alignment starts decrease at word " + std::to_string(i));
    prev_start = a.start_sec;
  }
}

inline void validate_alignment_length(const Utterance& u) {
  if (u.alignments.empty()) return;
  const double limit = u.duration_sec() + kAlignmentSlackSec;
  if (u.alignments.back().end_sec > limit + 1e-9) {
    throw LengthMismatchError(u.id, "last word ends at " + std::to_string(u.alignments.back().end_sec) +
                                        " s but features cover " + std::to_string(u.duration_sec()) + " s");
  }
}

/// Reads one split directory and validates every invariant and cross-reference.
inline Corpus load_manifest(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("manifest directory not found: " + dir.string());
  Corpus corpus;
  std::size_t feature_dim = 0;

  const auto utt_file = dir / "utterances.jsonl";
  std::set<std::string> seen_ids;
  detail::for_each_jsonl(utt_file, true, [&](const json& rec, std::size_t lineno) {
    const auto name = detail::record_name(rec, "id", utt_file, lineno);
    Utterance u;
    std::string feat_path;
    detail::parse_record(name, [&] {
      u.id = rec.at("id").get<std::string>();
      u.words = rec.at("words").get<std::vector<std::string>>();
      for (const auto& a : rec.at("alignments")) {
        if (!a.is_array() || a.size() != 2) throw std::invalid_argument("alignment must be [start, end]");
        u.alignments.push_back({a[0].get<double>(), a[1].get<double>()});
      }
      feat_path = rec.at("features").get<std::string>();
    });
    if (!seen_ids.insert(u.id).second) throw MalformedRecordError(u.id, "duplicate utterance id");
    u.features = read_feature_file(dir / feat_path);
    if (feature_dim == 0) feature_dim = static_cast<std::size_t>(u.features.cols());
    if (static_cast<std::size_t>(u.features.cols()) != feature_dim) {
      throw LengthMismatchError(u.id, "feature dimension " + std::to_string(u.features.cols()) + " differs from " +
                                          std::to_string(feature_dim));
    }
    validate_utterance(u);
    corpus.utterances.push_back(std::move(u));
  });

  const auto img_file = dir / "images.jsonl";
  std::size_t n_props = 0;
  bool first_image = true;
  detail::for_each_jsonl(img_file, false, [&](const json& rec, std::size_t lineno) {
    const auto name = detail::record_name(rec, "image_id", img_file, lineno);
    auto v = std::make_shared<VisualContext>();
    std::string gpath, ppath;
    detail::parse_record(name, [&] {
      v->image_id = rec.at("image_id").get<std::string>();
      gpath = rec.at("global_feature").get<std::string>();
      ppath = rec.at("proposal_features").get<std::string>();
      for (const auto& b : rec.at("boxes")) v->boxes.push_back(detail::box_from_json(b));
    });
    for (const auto& b : v->boxes) {
      if (!b.well_formed()) throw MalformedRecordError(v->image_id, "proposal box is not well-formed");
    }
    v->global_file = fs::absolute(dir / gpath).lexically_normal().string();
    v->proposal_file = fs::absolute(dir / ppath).lexically_normal().string();
    v->global_feature = read_feature_file(v->global_file);
    v->proposals = read_feature_file(v->proposal_file);
    if (v->global_feature.rows() != 1) throw LengthMismatchError(v->image_id, "global feature must be one row");
    if (static_cast<std::size_t>(v->proposals.rows()) != v->boxes.size()) {
      throw LengthMismatchError(v->image_id, std::to_string(v->boxes.size()) + " boxes but " +
                                                 std::to_string(v->proposals.rows()) + " proposal features");
    }
    if (v->proposals.cols() != v->global_feature.cols()) {
      throw LengthMismatchError(v->image_id, "proposal and global feature widths differ");
    }
    if (first_image) {
      n_props = v->boxes.size();
      first_image = false;
    } else if (v->boxes.size() != n_props) {
      throw LengthMismatchError(v->image_id, "proposal count " + std::to_string(v->boxes.size()) +
                                                 " differs from corpus-wide " + std::to_string(n_props));
    }
    if (!corpus.images.emplace(v->image_id, v).second) throw MalformedRecordError(v->image_id, "duplicate image id");
  });

  std::map<std::string, const Utterance*> by_id;
  for (const auto& u : corpus.utterances) by_id[u.id] = &u;

  const auto link_file = dir / "links.jsonl";
  detail::for_each_jsonl(link_file, false, [&](const json& rec, std::size_t lineno) {
    const auto name = detail::record_name(rec, "utterance_id", link_file, lineno);
    std::string uid, iid;
    detail::parse_record(name, [&] {
      uid = rec.at("utterance_id").get<std::string>();
      iid = rec.at("image_id").get<std::string>();
    });
    if (!by_id.count(uid)) throw DanglingReferenceError(uid, "link names an unknown utterance");
    if (!corpus.images.count(iid)) throw DanglingReferenceError(uid, "link names unknown image " + iid);
    corpus.links[uid] = iid;
  });

  const auto ann_file = dir / "annotations.jsonl";
  detail::for_each_jsonl(ann_file, false, [&](const json& rec, std::size_t lineno) {
    const auto name = detail::record_name(rec, "utterance_id", ann_file, lineno);
    GroundTruthAnnotation ann;
    detail::parse_record(name, [&] {
      ann.utterance_id = rec.at("utterance_id").get<std::string>();
      for (const auto& e : rec.at("entries")) {
        AnnotationEntry entry;
        entry.word_indices = e.at("word_indices").get<std::vector<std::size_t>>();
        entry.box = detail::box_from_json(e.at("box"));
        ann.entries.push_back(std::move(entry));
      }
    });
    auto it = by_id.find(ann.utterance_id);
    if (it == by_id.end()) throw DanglingReferenceError(ann.utterance_id, "annotation names an unknown utterance");
    for (const auto& e : ann.entries) {
      if (!e.box.well_formed()) throw MalformedRecordError(ann.utterance_id, "annotation box is not well-formed");
      for (auto wi : e.word_indices) {
        if (wi >= it->second->words.size()) throw MalformedRecordError(ann.utterance_id, "annotation word index out of range");
      }
    }
    corpus.annotations[ann.utterance_id] = std::move(ann);
  });

  const auto mask_file = dir / "masks.jsonl";
  detail::for_each_jsonl(mask_file, false, [&](const json& rec, std::size_t lineno) {
    const auto name = detail::record_name(rec, "utterance_id", mask_file, lineno);
    MaskRecord m;
    detail::parse_record(name, [&] {
      m.spec.utterance_id = rec.at("utterance_id").get<std::string>();
      m.base_id = rec.value("base_id", m.spec.utterance_id);
      m.probability = rec.at("probability").get<double>();
      m.spec.masked_word_indices = rec.at("masked_word_indices").get<std::vector<std::size_t>>();
      for (const auto& s : rec.at("spans")) {
        m.spec.masked_frame_spans.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
      }
    });
    auto it = by_id.find(m.spec.utterance_id);
    if (it == by_id.end()) throw DanglingReferenceError(m.spec.utterance_id, "mask names an unknown utterance");
    for (auto wi : m.spec.masked_word_indices) {
      if (wi >= it->second->words.size()) throw MalformedRecordError(m.spec.utterance_id, "masked word index out of range");
    }
    corpus.masks[m.spec.utterance_id] = std::move(m);
  });

  // Masked features no longer follow the original time axis.
  for (const auto& u : corpus.utterances) {
    if (!corpus.masks.count(u.id)) validate_alignment_length(u);
  }
  return corpus;
}

struct ManifestWriteOptions {
  // Reference image feature files already on disk instead of rewriting them.
  bool reference_existing_images = false;
};

namespace detail {

inline std::string safe_file_stem(const std::string& id) {
  std::string s = id;
  for (auto& c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  }
  return s;
}

inline void write_lines(const fs::path& path, const std::vector<json>& records) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& r : records) os << r.dump() << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace detail

inline void save_manifest(const Corpus& corpus, const fs::path& dir, const ManifestWriteOptions& options = {}) {
  std::error_code ec;
  fs::create_directories(dir / "features", ec);
  fs::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create manifest directory " + dir.string() + ": " + ec.message());

  std::vector<json> utts;
  for (const auto& u : corpus.utterances) {
    const auto rel = fs::path("features") / (detail::safe_file_stem(u.id) + ".bin");
    write_feature_file(dir / rel, u.features);
    json align = json::array();
    for (const auto& a : u.alignments) align.push_back(json::array({a.start_sec, a.end_sec}));
    utts.push_back({{"id", u.id}, {"words", u.words}, {"alignments", align}, {"features", rel.generic_string()}});
  }
  detail::write_lines(dir / "utterances.jsonl", utts);

  std::vector<json> imgs;
  for (const auto& [id, v] : corpus.images) {
    std::string gpath, ppath;
    if (options.reference_existing_images && !v->global_file.empty() && !v->proposal_file.empty()) {
      const auto base = fs::absolute(dir);
      gpath = fs::path(v->global_file).lexically_relative(base).generic_string();
      ppath = fs::path(v->proposal_file).lexically_relative(base).generic_string();
    } else {
      const auto stem = detail::safe_file_stem(id);
      gpath = (fs::path("images") / (stem + ".global.bin")).generic_string();
      ppath = (fs::path("images") / (stem + ".proposals.bin")).generic_string();
      write_feature_file(dir / gpath, v->global_feature);
      write_feature_file(dir / ppath, v->proposals);
    }
    json boxes = json::array();
    for (const auto& b : v->boxes) boxes.push_back(detail::box_to_json(b));
    imgs.push_back({{"image_id", id}, {"global_feature", gpath}, {"boxes", boxes}, {"proposal_features", ppath}});
  }
  detail::write_lines(dir / "images.jsonl", imgs);

  std::vector<json> links;
  for (const auto& u : corpus.utterances) {
    auto it = corpus.links.find(u.id);
    if (it != corpus.links.end()) links.push_back({{"utterance_id", u.id}, {"image_id", it->second}});
  }
  detail::write_lines(dir / "links.jsonl", links);

  std::vector<json> anns;
  for (const auto& u : corpus.utterances) {
    auto it = corpus.annotations.find(u.id);
    if (it == corpus.annotations.end()) continue;
    json entries = json::array();
    for (const auto& e : it->second.entries) {
      entries.push_back({{"word_indices", e.word_indices}, {"box", detail::box_to_json(e.box)}});
    }
    anns.push_back({{"utterance_id", u.id}, {"entries", entries}});
  }
  detail::write_lines(dir / "annotations.jsonl", anns);

  if (corpus.is_masked()) {
    std::vector<json> masks;
    for (const auto& u : corpus.utterances) {
      auto it = corpus.masks.find(u.id);
      if (it == corpus.masks.end()) continue;
      const auto& m = it->second;
      json spans = json::array();
      for (const auto& s : m.spec.masked_frame_spans) spans.push_back(json::array({s.start, s.end}));
      masks.push_back({{"utterance_id", u.id},
                       {"base_id", m.base_id},
                       {"probability", m.probability},
                       {"masked_word_indices", m.spec.masked_word_indices},
                       {"spans", spans}});
    }
    detail::write_lines(dir / "masks.jsonl", masks);
  }
}

/// Category list: UTF-8 text, one word per line; words are lowercased.
inline WordCategoryList read_category_list(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing category list " + path.string());
  WordCategoryList list;
  list.name = path.stem().string();
  std::string line;
  while (std::getline(is, line)) {
    auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    auto e = line.find_last_not_of(" \t\r");
    list.words.insert(lowercase(line.substr(b, e - b + 1)));
  }
  return list;
}

inline void write_category_list(const fs::path& path, const WordCategoryList& list) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& w : list.words) os << w << '\n';
}

}  // namespace mmasr::corpus
