#include "tact/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "tact/io.hpp"
#include "tact/rng.hpp"

namespace tact {

namespace {

constexpr char kFeatureMagic[4] = {'T', 'A', 'C', 'T'};
constexpr std::uint16_t kFeatureVersion = 1;
constexpr std::string_view kAnnotationHeader = "sample_id,participant,verb,noun,action,split";

std::vector<std::uint8_t> tail_mask(const std::vector<std::int64_t>& counts, std::int64_t threshold) {
  std::vector<std::uint8_t> mask(counts.size(), 0);
  for (std::size_t i = 0; i < counts.size(); ++i) mask[i] = counts[i] < threshold ? 1 : 0;
  return mask;
}

// Bottom-quartile boundary: ascending order statistic at index C/4.
std::int64_t quartile_threshold(std::vector<std::int64_t> counts) {
  if (counts.empty()) return 0;
  std::sort(counts.begin(), counts.end());
  return counts[counts.size() / 4];
}

int parse_int_field(std::string_view field, std::size_t line_no, std::string_view what) {
  int value = 0;
  auto res = std::from_chars(field.data(), field.data() + field.size(), value);
  if (res.ec != std::errc{} || res.ptr != field.data() + field.size()) {
    throw ParseError("annotations line " + std::to_string(line_no) + ": bad " + std::string(what) +
                     " value '" + std::string(field) + "'");
  }
  if (value < 0) {
    throw ParseError("annotations line " + std::to_string(line_no) + ": " + std::string(what) +
                     " label out of range: " + std::to_string(value));
  }
  return value;
}

struct AnnotationRow {
  std::string participant;
  int verb, noun, action;
  Split split;
};

}  // namespace

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ParseError("unknown split '" + std::string(s) + "' (expected train/val/test)");
}

const std::vector<std::int64_t>& ActionSpace::freq(Task t) const {
  switch (t) {
    case Task::verb: return verb_freq;
    case Task::noun: return noun_freq;
    default: return action_freq;
  }
}

const std::vector<std::uint8_t>& ActionSpace::tail(Task t) const {
  switch (t) {
    case Task::verb: return verb_tail;
    case Task::noun: return noun_tail;
    default: return action_tail;
  }
}

std::int64_t ActionSpace::tail_threshold(Task t) const {
  switch (t) {
    case Task::verb: return verb_tail_threshold;
    case Task::noun: return noun_tail_threshold;
    default: return action_tail_threshold;
  }
}

int ActionSpace::n_classes(Task t) const {
  switch (t) {
    case Task::verb: return n_verbs;
    case Task::noun: return n_nouns;
    default: return n_actions;
  }
}

bool ActionSpace::is_unseen(const std::string& participant) const {
  return std::binary_search(unseen_participants.begin(), unseen_participants.end(), participant);
}

ActionSpace ActionSpace::build(std::span<const ModalitySample> samples,
                               std::int64_t explicit_tail_count) {
  ActionSpace sp;
  for (const auto& s : samples) {
    sp.n_verbs = std::max(sp.n_verbs, s.verb + 1);
    sp.n_nouns = std::max(sp.n_nouns, s.noun + 1);
    sp.n_actions = std::max(sp.n_actions, s.action + 1);
  }
  sp.verb_freq.assign(static_cast<std::size_t>(sp.n_verbs), 0);
  sp.noun_freq.assign(static_cast<std::size_t>(sp.n_nouns), 0);
  sp.action_freq.assign(static_cast<std::size_t>(sp.n_actions), 0);
  sp.action_to_pair.assign(static_cast<std::size_t>(sp.n_actions), {-1, -1});

  std::set<std::string> train_participants, all_participants;
  std::map<std::pair<int, int>, int> pair_to_action;
  for (const auto& s : samples) {
    all_participants.insert(s.participant_id);
    if (s.split != Split::train) continue;
    sp.n_train += 1;
    sp.verb_freq[static_cast<std::size_t>(s.verb)] += 1;
    sp.noun_freq[static_cast<std::size_t>(s.noun)] += 1;
    sp.action_freq[static_cast<std::size_t>(s.action)] += 1;
    train_participants.insert(s.participant_id);

    auto& pair = sp.action_to_pair[static_cast<std::size_t>(s.action)];
    if (pair.first < 0) {
      auto [it, inserted] = pair_to_action.emplace(std::make_pair(s.verb, s.noun), s.action);
      if (!inserted) {
        throw ParseError("action table not injective: actions " + std::to_string(it->second) +
                         " and " + std::to_string(s.action) + " both map to (verb " +
                         std::to_string(s.verb) + ", noun " + std::to_string(s.noun) + ")");
      }
      pair = {s.verb, s.noun};
    } else if (pair != std::make_pair(s.verb, s.noun)) {
      throw ParseError("sample '" + s.sample_id + "': action " + std::to_string(s.action) +
                       " labelled (verb " + std::to_string(s.verb) + ", noun " +
                       std::to_string(s.noun) + ") but table has (verb " +
                       std::to_string(pair.first) + ", noun " + std::to_string(pair.second) + ")");
    }
  }
  // Eval samples must agree with the table wherever their action was seen in
  // training.
  for (const auto& s : samples) {
    if (s.split == Split::train) continue;
    const auto& pair = sp.action_to_pair[static_cast<std::size_t>(s.action)];
    if (pair.first >= 0 && pair != std::make_pair(s.verb, s.noun)) {
      throw ParseError("sample '" + s.sample_id + "': action " + std::to_string(s.action) +
                       " inconsistent with the train-split action table");
    }
  }

  sp.verb_tail_threshold =
      explicit_tail_count >= 0 ? explicit_tail_count : quartile_threshold(sp.verb_freq);
  sp.noun_tail_threshold =
      explicit_tail_count >= 0 ? explicit_tail_count : quartile_threshold(sp.noun_freq);
  sp.action_tail_threshold =
      explicit_tail_count >= 0 ? explicit_tail_count : quartile_threshold(sp.action_freq);
  sp.verb_tail = tail_mask(sp.verb_freq, sp.verb_tail_threshold);
  sp.noun_tail = tail_mask(sp.noun_freq, sp.noun_tail_threshold);
  sp.action_tail = tail_mask(sp.action_freq, sp.action_tail_threshold);

  for (const auto& p : all_participants) {
    if (!train_participants.contains(p)) sp.unseen_participants.push_back(p);
  }
  return sp;
}

std::vector<int> Dataset::indices(Split split) const {
  std::vector<int> idx;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split == split) idx.push_back(static_cast<int>(i));
  }
  return idx;
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

namespace {

Tensor<float> read_payload(ByteReader& r, int n_frames, int d) {
  std::vector<float> v(static_cast<std::size_t>(n_frames) * static_cast<std::size_t>(d));
  for (auto& x : v) x = r.f32();
  return Tensor<float>::from_values({n_frames, d}, std::move(v));
}

void write_payload(ByteWriter& w, const Tensor<float>& t) {
  for (float v : t.values()) w.f32(v);
}

std::map<std::string, AnnotationRow> parse_annotations(const std::filesystem::path& path) {
  std::string text = read_binary_file(path);
  std::map<std::string, AnnotationRow> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != kAnnotationHeader) {
        throw ParseError(path.string() + " line 1: bad header, expected '" +
                         std::string(kAnnotationHeader) + "'");
      }
      continue;
    }
    std::vector<std::string_view> fields;
    std::string_view rest = line;
    while (true) {
      auto comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    if (fields.size() != 6) {
      throw ParseError(path.string() + " line " + std::to_string(line_no) + ": expected 6 fields, got " +
                       std::to_string(fields.size()));
    }
    AnnotationRow row;
    row.participant = std::string(fields[1]);
    row.verb = parse_int_field(fields[2], line_no, "verb");
    row.noun = parse_int_field(fields[3], line_no, "noun");
    row.action = parse_int_field(fields[4], line_no, "action");
    try {
      row.split = parse_split(fields[5]);
    } catch (const ParseError& e) {
      throw ParseError(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
    auto [it, inserted] = rows.emplace(std::string(fields[0]), std::move(row));
    if (!inserted) {
      throw ParseError(path.string() + " line " + std::to_string(line_no) + ": duplicate sample_id '" +
                       std::string(fields[0]) + "'");
    }
  }
  return rows;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& feature_file,
                     const std::filesystem::path& annotation_file) {
  std::string bytes = read_binary_file(feature_file);
  ByteReader r(bytes, feature_file.string());
  const std::string_view magic = r.raw(4);
  if (magic != std::string_view(kFeatureMagic, 4)) {
    throw ParseError(feature_file.string() + ": bad magic '" + std::string(magic) +
                     "', expected 'TACT'");
  }
  const std::uint16_t version = r.u16();
  if (version != kFeatureVersion) {
    throw ParseError(feature_file.string() + ": unsupported version " + std::to_string(version));
  }
  Dataset ds;
  const std::uint32_t n_samples = r.u32();
  ds.n_frames = static_cast<int>(r.u32());
  ds.d_rgb = static_cast<int>(r.u32());
  ds.d_flow = static_cast<int>(r.u32());
  ds.d_obj = static_cast<int>(r.u32());
  if (ds.n_frames <= 0 || ds.d_rgb <= 0 || ds.d_flow <= 0 || ds.d_obj <= 0) {
    throw ParseError(feature_file.string() + ": non-positive dimension in header");
  }
  ds.samples.reserve(n_samples);
  for (std::uint32_t i = 0; i < n_samples; ++i) {
    ModalitySample s;
    const std::uint16_t id_len = r.u16();
    s.sample_id = std::string(r.raw(id_len));
    s.rgb = read_payload(r, ds.n_frames, ds.d_rgb);
    s.flow = read_payload(r, ds.n_frames, ds.d_flow);
    s.obj = read_payload(r, ds.n_frames, ds.d_obj);
    ds.samples.push_back(std::move(s));
  }
  r.expect_end();

  auto rows = parse_annotations(annotation_file);
  std::set<std::string> feature_ids;
  for (auto& s : ds.samples) {
    if (!feature_ids.insert(s.sample_id).second) {
      throw ParseError(feature_file.string() + ": duplicate sample_id '" + s.sample_id + "'");
    }
    auto it = rows.find(s.sample_id);
    if (it == rows.end()) {
      throw ParseError(annotation_file.string() + ": no annotation for sample_id '" + s.sample_id +
                       "'");
    }
    s.participant_id = it->second.participant;
    s.verb = it->second.verb;
    s.noun = it->second.noun;
    s.action = it->second.action;
    s.split = it->second.split;
  }
  for (const auto& [id, row] : rows) {
    if (!feature_ids.contains(id)) {
      throw ParseError(annotation_file.string() + ": dangling annotation for sample_id '" + id +
                       "' (not in feature file)");
    }
  }
  ds.space = ActionSpace::build(ds.samples);
  return ds;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& feature_file,
                   const std::filesystem::path& annotation_file) {
  ByteWriter w;
  w.bytes(std::string_view(kFeatureMagic, 4));
  w.u16(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(dataset.samples.size()));
  w.u32(static_cast<std::uint32_t>(dataset.n_frames));
  w.u32(static_cast<std::uint32_t>(dataset.d_rgb));
  w.u32(static_cast<std::uint32_t>(dataset.d_flow));
  w.u32(static_cast<std::uint32_t>(dataset.d_obj));
  std::ostringstream csv;
  csv << kAnnotationHeader << '\n';
  for (const auto& s : dataset.samples) {
    if (s.sample_id.size() > UINT16_MAX) throw ConfigError("sample_id too long");
    if (s.sample_id.find(',') != std::string::npos ||
        s.participant_id.find(',') != std::string::npos) {
      throw ConfigError("sample/participant ids must not contain commas");
    }
    w.u16(static_cast<std::uint16_t>(s.sample_id.size()));
    w.bytes(s.sample_id);
    write_payload(w, s.rgb);
    write_payload(w, s.flow);
    write_payload(w, s.obj);
    csv << s.sample_id << ',' << s.participant_id << ',' << s.verb << ',' << s.noun << ','
        << s.action << ',' << split_name(s.split) << '\n';
  }
  write_binary_file(feature_file, w.data());
  write_binary_file(annotation_file, csv.str());
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

std::vector<double> zipf_probabilities(int n, double exponent) {
  std::vector<double> p(static_cast<std::size_t>(n));
  double total = 0;
  for (int k = 0; k < n; ++k) {
    p[static_cast<std::size_t>(k)] = 1.0 / std::pow(static_cast<double>(k + 1), exponent);
    total += p[static_cast<std::size_t>(k)];
  }
  for (auto& x : p) x /= total;
  return p;
}

Dataset generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.n_samples <= 0 || cfg.n_frames <= 0 || cfg.d_rgb <= 0 || cfg.d_flow <= 0 ||
      cfg.d_obj <= 0 || cfg.n_verbs <= 0 || cfg.n_nouns <= 0 || cfg.n_actions <= 0 ||
      cfg.n_participants <= 0) {
    throw ConfigError("generate_synthetic: all extents must be positive");
  }
  if (cfg.n_actions > cfg.n_verbs * cfg.n_nouns) {
    throw ConfigError("generate_synthetic: n_actions=" + std::to_string(cfg.n_actions) +
                      " exceeds the number of (verb, noun) pairs " +
                      std::to_string(cfg.n_verbs * cfg.n_nouns));
  }
  if (cfg.val_fraction < 0 || cfg.test_fraction < 0 ||
      cfg.val_fraction + cfg.test_fraction >= 1.0) {
    throw ConfigError("generate_synthetic: val/test fractions must be >= 0 and sum below 1");
  }
  if (cfg.unseen_fraction < 0 || cfg.unseen_fraction >= 1.0) {
    throw ConfigError("generate_synthetic: unseen_fraction must be in [0, 1)");
  }

  Rng rng(cfg.seed);

  // Each action id owns a distinct (verb, noun) pair.
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(static_cast<std::size_t>(cfg.n_verbs) * cfg.n_nouns);
  for (int v = 0; v < cfg.n_verbs; ++v)
    for (int n = 0; n < cfg.n_nouns; ++n) pairs.emplace_back(v, n);
  rng.shuffle(pairs);
  pairs.resize(static_cast<std::size_t>(cfg.n_actions));

  // Class-conditional prototypes per modality.
  auto draw_prototypes = [&rng, &cfg](int classes, int d) {
    std::vector<std::vector<float>> protos(static_cast<std::size_t>(classes));
    for (auto& p : protos) {
      p.resize(static_cast<std::size_t>(d));
      for (auto& x : p) x = static_cast<float>(cfg.signal_strength * rng.normal());
    }
    return protos;
  };
  const std::array<int, 3> dims = {cfg.d_rgb, cfg.d_flow, cfg.d_obj};
  std::array<std::vector<std::vector<float>>, 3> verb_protos, noun_protos;
  for (int m = 0; m < 3; ++m) {
    verb_protos[static_cast<std::size_t>(m)] = draw_prototypes(cfg.n_verbs, dims[static_cast<std::size_t>(m)]);
    noun_protos[static_cast<std::size_t>(m)] = draw_prototypes(cfg.n_nouns, dims[static_cast<std::size_t>(m)]);
  }

  // The trailing unseen_fraction of participants never receives train samples.
  const int n_unseen = std::min(
      cfg.n_participants - 1,
      static_cast<int>(std::llround(cfg.unseen_fraction * cfg.n_participants)));
  const int n_seen = cfg.n_participants - n_unseen;
  auto participant_name = [](int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "P%03d", i);
    return std::string(buf);
  };

  std::vector<double> zipf = zipf_probabilities(cfg.n_actions, cfg.zipf_exponent);
  std::vector<double> cum(zipf.size());
  double acc = 0;
  for (std::size_t i = 0; i < zipf.size(); ++i) {
    acc += zipf[i];
    cum[i] = acc;
  }

  Dataset ds;
  ds.n_frames = cfg.n_frames;
  ds.d_rgb = cfg.d_rgb;
  ds.d_flow = cfg.d_flow;
  ds.d_obj = cfg.d_obj;
  ds.samples.reserve(static_cast<std::size_t>(cfg.n_samples));

  for (int i = 0; i < cfg.n_samples; ++i) {
    ModalitySample s;
    {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "S%05d", i);
      s.sample_id = buf;
    }
    const double u = rng.uniform();
    s.split = u < cfg.test_fraction              ? Split::test
              : u < cfg.test_fraction + cfg.val_fraction ? Split::val
                                                         : Split::train;
    s.participant_id = s.split == Split::train
                           ? participant_name(rng.uniform_int(n_seen))
                           : participant_name(rng.uniform_int(cfg.n_participants));
    const double z = rng.uniform();
    int action = static_cast<int>(std::lower_bound(cum.begin(), cum.end(), z) - cum.begin());
    if (action >= cfg.n_actions) action = cfg.n_actions - 1;
    s.action = action;
    s.verb = pairs[static_cast<std::size_t>(action)].first;
    s.noun = pairs[static_cast<std::size_t>(action)].second;

    auto gen_modality = [&](int m) {
      const int d = dims[static_cast<std::size_t>(m)];
      std::vector<float> v(static_cast<std::size_t>(cfg.n_frames) * static_cast<std::size_t>(d));
      for (auto& x : v) x = static_cast<float>(cfg.noise_sigma * rng.normal());
      // Plant the class signal at the earliest frame so prediction requires
      // attending across the whole window.
      const auto& vp = verb_protos[static_cast<std::size_t>(m)][static_cast<std::size_t>(s.verb)];
      const auto& np = noun_protos[static_cast<std::size_t>(m)][static_cast<std::size_t>(s.noun)];
      for (int j = 0; j < d; ++j) {
        v[static_cast<std::size_t>(j)] += vp[static_cast<std::size_t>(j)] + np[static_cast<std::size_t>(j)];
      }
      return Tensor<float>::from_values({cfg.n_frames, d}, std::move(v));
    };
    s.rgb = gen_modality(0);
    s.flow = gen_modality(1);
    s.obj = gen_modality(2);
    ds.samples.push_back(std::move(s));
  }
  ds.space = ActionSpace::build(ds.samples);
  return ds;
}

EvalPartitions partition_eval(std::span<const ModalitySample> samples,
                              std::span<const int> eval_idx, const ActionSpace& space) {
  EvalPartitions parts;
  for (int idx : eval_idx) {
    const auto& s = samples[static_cast<std::size_t>(idx)];
    parts.overall.push_back(idx);
    if (space.is_unseen(s.participant_id)) parts.unseen.push_back(idx);
    const std::array<int, 3> labels = {s.verb, s.noun, s.action};
    for (int t = 0; t < 3; ++t) {
      const auto& mask = space.tail(static_cast<Task>(t));
      const int cls = labels[static_cast<std::size_t>(t)];
      if (cls < static_cast<int>(mask.size()) && mask[static_cast<std::size_t>(cls)]) {
        parts.tail[static_cast<std::size_t>(t)].push_back(idx);
      }
    }
  }
  return parts;
}

}  // namespace tact
