#include "fhvae/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "fhvae/error.hpp"
#include "fhvae/io.hpp"
#include "fhvae/rng.hpp"

namespace fhvae::corpus {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

void validate(const CorpusConfig& cfg) {
  if (cfg.n_subjects < 1 || cfg.n_stimuli < 1 || cfg.sample_rate_hz < 1 || cfg.n_channels < 1 ||
      cfg.content_source_count < 1)
    throw ConfigError("corpus: all counts must be >= 1");
  if (cfg.stimulus_duration_s <= 0) throw ConfigError("corpus: stimulus duration must be > 0");
  if (cfg.noise_std < 0) throw ConfigError("corpus: noise_std must be >= 0");
  if (cfg.subject_mix_strength < 0)
    throw ConfigError("corpus: subject_mix_strength must be >= 0");
}

namespace {

// Moving-average smoothing width for the per-stimulus source signals: keeps
// content temporally local at the 500 ms segment scale while band-limiting
// well below Nyquist.
constexpr int kSourceSmoothing = 5;

// The subject factor is dominated by stationary channel offsets, with a
// moderate perturbation of the shared mixing matrix on top. Offsets are the
// sequence-level factor the subject latent is meant to absorb; the mixing
// perturbation keeps subjects apart without making content extraction depend
// on per-subject unmixing.
constexpr double kMixPerturbation = 0.5;

int frames_per_stimulus(const CorpusConfig& cfg) {
  return static_cast<int>(std::llround(cfg.stimulus_duration_s * cfg.sample_rate_hz));
}

// Shared per-stimulus sources: smoothed white noise, rescaled to unit variance.
Mat<float> stimulus_sources(const CorpusConfig& cfg, int stimulus) {
  const int frames = frames_per_stimulus(cfg);
  const int n_src = cfg.content_source_count;
  Mat<float> src(n_src, frames);
  const double gain = std::sqrt(static_cast<double>(kSourceSmoothing));
  for (int s = 0; s < n_src; ++s) {
    Rng rng(cfg.seed, stream::kStimulusSource, static_cast<std::uint64_t>(stimulus),
            static_cast<std::uint64_t>(s));
    std::vector<double> white(frames + kSourceSmoothing - 1);
    for (double& w : white) w = rng.normal();
    for (int t = 0; t < frames; ++t) {
      double acc = 0;
      for (int k = 0; k < kSourceSmoothing; ++k) acc += white[t + k];
      src.at(s, t) = static_cast<float>(acc / kSourceSmoothing * gain);
    }
  }
  return src;
}

struct SubjectFactors {
  Mat<double> mixing;          // C x n_sources
  std::vector<double> offset;  // C
};

SubjectFactors subject_factors(const CorpusConfig& cfg, int subject) {
  SubjectFactors f;
  const int C = cfg.n_channels;
  const int S = cfg.content_source_count;
  const double inv_sqrt_s = 1.0 / std::sqrt(static_cast<double>(S));
  f.mixing.resize(C, S);
  Rng base(cfg.seed, stream::kMixBase);
  for (int c = 0; c < C; ++c)
    for (int s = 0; s < S; ++s) f.mixing.at(c, s) = base.normal() * inv_sqrt_s;
  Rng mix(cfg.seed, stream::kSubjectMix, static_cast<std::uint64_t>(subject));
  for (int c = 0; c < C; ++c)
    for (int s = 0; s < S; ++s)
      f.mixing.at(c, s) +=
          kMixPerturbation * cfg.subject_mix_strength * mix.normal() * inv_sqrt_s;
  Rng off(cfg.seed, stream::kSubjectOffset, static_cast<std::uint64_t>(subject));
  f.offset.resize(C);
  for (int c = 0; c < C; ++c) f.offset[c] = cfg.subject_mix_strength * off.normal();
  return f;
}

}  // namespace

std::vector<Recording> generate_corpus(const CorpusConfig& cfg) {
  validate(cfg);
  const int frames = frames_per_stimulus(cfg);
  if (frames < 1) throw ConfigError("corpus: stimulus too short for the sample rate");
  std::vector<Mat<float>> sources;
  sources.reserve(cfg.n_stimuli);
  for (int st = 0; st < cfg.n_stimuli; ++st) sources.push_back(stimulus_sources(cfg, st));

  std::vector<Recording> out;
  out.reserve(static_cast<std::size_t>(cfg.n_subjects) * cfg.n_stimuli);
  for (int subj = 0; subj < cfg.n_subjects; ++subj) {
    SubjectFactors f = subject_factors(cfg, subj);
    for (int st = 0; st < cfg.n_stimuli; ++st) {
      Recording rec;
      rec.sequence_id = subj * cfg.n_stimuli + st;
      rec.subject_id = subj;
      rec.stimulus_id = st;
      rec.frames.resize(frames, cfg.n_channels);
      Rng noise(cfg.seed, stream::kNoise, static_cast<std::uint64_t>(subj),
                static_cast<std::uint64_t>(st));
      const Mat<float>& src = sources[st];
      for (int t = 0; t < frames; ++t) {
        float* row = rec.frames.row(t);
        for (int c = 0; c < cfg.n_channels; ++c) {
          double acc = f.offset[c];
          for (int s = 0; s < cfg.content_source_count; ++s)
            acc += f.mixing.at(c, s) * src.at(s, t);
          if (cfg.noise_std > 0) acc += cfg.noise_std * noise.normal();
          row[c] = static_cast<float>(acc);
        }
      }
      out.push_back(std::move(rec));
    }
  }
  return out;
}

SegmentSet segment_and_label(const std::vector<Recording>& recordings, int seg_len,
                             LabelIndex& index) {
  if (seg_len < 1) throw ConfigError("segment_and_label: seg_len must be >= 1");
  SegmentSet set;
  index.key.clear();
  index.occurrences.clear();
  if (recordings.empty()) return set;
  set.seg_len = seg_len;
  set.channels = static_cast<int>(recordings.front().frames.cols());
  std::map<std::pair<int, int>, int> dense;
  for (const Recording& rec : recordings) {
    if (static_cast<int>(rec.frames.cols()) != set.channels)
      throw DataError("segment_and_label: recordings disagree on channel count");
    const int n_segments = static_cast<int>(rec.frames.rows()) / seg_len;
    for (int n = 0; n < n_segments; ++n) {
      auto key = std::make_pair(rec.stimulus_id, n);
      auto [it, inserted] = dense.try_emplace(key, static_cast<int>(index.key.size()));
      if (inserted) {
        index.key.push_back(key);
        index.occurrences.push_back(0);
      }
      ++index.occurrences[it->second];
      set.sequence_id.push_back(rec.sequence_id);
      set.subject_id.push_back(rec.subject_id);
      set.stimulus_id.push_back(rec.stimulus_id);
      set.label.push_back(it->second);
      set.offset.push_back(n);
      const float* start = rec.frames.row(static_cast<std::size_t>(n) * seg_len);
      set.data.insert(set.data.end(), start,
                      start + static_cast<std::size_t>(seg_len) * set.channels);
    }
  }
  return set;
}

SplitAssignment split_recording(int n_segments) {
  if (n_segments < 5) throw DataError("split_recording: need at least 5 segments");
  const int head = static_cast<int>(0.4 * n_segments);
  const int tail_begin = n_segments - head;
  const int middle = tail_begin - head;
  const int n_val = middle / 2;
  SplitAssignment out;
  for (int i = 0; i < head; ++i) out.train.push_back(i);
  for (int i = tail_begin; i < n_segments; ++i) out.train.push_back(i);
  for (int i = head; i < head + n_val; ++i) out.val.push_back(i);
  for (int i = head + n_val; i < tail_begin; ++i) out.test.push_back(i);
  return out;
}

NormStats compute_norm_stats(const SegmentSet& segments, const std::vector<std::uint8_t>& use) {
  if (use.size() != segments.size())
    throw DataError("compute_norm_stats: mask size mismatch");
  const int C = segments.channels;
  NormStats stats;
  stats.mean.assign(C, 0.0);
  stats.stddev.assign(C, 0.0);
  std::vector<double> sq(C, 0.0);
  std::size_t frames = 0;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    if (!use[i]) continue;
    const float* d = segments.seg(i);
    for (int t = 0; t < segments.seg_len; ++t) {
      for (int c = 0; c < C; ++c) {
        double v = d[t * C + c];
        stats.mean[c] += v;
        sq[c] += v * v;
      }
    }
    frames += static_cast<std::size_t>(segments.seg_len);
  }
  if (frames == 0) throw DataError("compute_norm_stats: empty training split");
  for (int c = 0; c < C; ++c) {
    stats.mean[c] /= static_cast<double>(frames);
    double var = sq[c] / static_cast<double>(frames) - stats.mean[c] * stats.mean[c];
    stats.stddev[c] = std::sqrt(std::max(var, 0.0));
    stats.stddev[c] = std::max(stats.stddev[c], kNormStdFloor);
  }
  return stats;
}

void normalize(SegmentSet& segments, const NormStats& stats) {
  const int C = segments.channels;
  if (static_cast<int>(stats.mean.size()) != C || static_cast<int>(stats.stddev.size()) != C)
    throw DataError("normalize: stats channel count mismatch");
  std::vector<float> mean(C), inv(C);
  for (int c = 0; c < C; ++c) {
    mean[c] = static_cast<float>(stats.mean[c]);
    inv[c] = static_cast<float>(1.0 / std::max(stats.stddev[c], kNormStdFloor));
  }
  for (std::size_t i = 0; i < segments.data.size(); ++i) {
    int c = static_cast<int>(i % C);
    segments.data[i] = (segments.data[i] - mean[c]) * inv[c];
  }
}

Dataset build_dataset(const std::vector<Recording>& recordings, const CorpusConfig& cfg,
                      int seg_len) {
  Dataset ds;
  ds.config = cfg;
  ds.seg_len = seg_len;
  ds.segments = segment_and_label(recordings, seg_len, ds.labels);
  if (ds.segments.size() == 0) throw DataError("build_dataset: no segments");

  ds.n_sequences = 0;
  for (const Recording& rec : recordings) ds.n_sequences = std::max(ds.n_sequences, rec.sequence_id + 1);
  ds.subject_of_sequence.assign(ds.n_sequences, -1);
  ds.stimulus_of_sequence.assign(ds.n_sequences, -1);
  for (const Recording& rec : recordings) {
    ds.subject_of_sequence[rec.sequence_id] = rec.subject_id;
    ds.stimulus_of_sequence[rec.sequence_id] = rec.stimulus_id;
  }

  // Per-recording split by segment offset; offsets map 1:1 to positions here
  // because segmentation emits consecutive windows.
  ds.split.assign(ds.segments.size(), Split::train);
  std::vector<int> seg_count(ds.n_sequences, 0);
  for (std::size_t i = 0; i < ds.segments.size(); ++i) ++seg_count[ds.segments.sequence_id[i]];
  std::vector<SplitAssignment> assign(ds.n_sequences);
  for (int s = 0; s < ds.n_sequences; ++s)
    if (seg_count[s] > 0) assign[s] = split_recording(seg_count[s]);
  for (std::size_t i = 0; i < ds.segments.size(); ++i) {
    const SplitAssignment& a = assign[ds.segments.sequence_id[i]];
    const int off = ds.segments.offset[i];
    if (std::binary_search(a.val.begin(), a.val.end(), off))
      ds.split[i] = Split::val;
    else if (std::binary_search(a.test.begin(), a.test.end(), off))
      ds.split[i] = Split::test;
    else
      ds.split[i] = Split::train;
  }

  ds.train_count_per_sequence.assign(ds.n_sequences, 0);
  std::vector<std::uint8_t> is_train(ds.segments.size(), 0);
  for (std::size_t i = 0; i < ds.segments.size(); ++i) {
    switch (ds.split[i]) {
      case Split::train:
        ds.train_segments.push_back(static_cast<int>(i));
        ++ds.train_count_per_sequence[ds.segments.sequence_id[i]];
        is_train[i] = 1;
        break;
      case Split::val:
        ds.val_segments.push_back(static_cast<int>(i));
        break;
      case Split::test:
        ds.test_segments.push_back(static_cast<int>(i));
        break;
    }
  }

  ds.train_segments_of_label.assign(ds.labels.n_labels(), {});
  for (int i : ds.train_segments)
    ds.train_segments_of_label[ds.segments.label[i]].push_back(i);
  for (int l = 0; l < ds.labels.n_labels(); ++l)
    if (!ds.train_segments_of_label[l].empty()) ds.train_labels.push_back(l);

  ds.norm = compute_norm_stats(ds.segments, is_train);
  normalize(ds.segments, ds.norm);
  return ds;
}

// ---- disk format ----

namespace {

constexpr char kRecMagic[4] = {'F', 'H', 'V', 'C'};
constexpr std::uint32_t kRecVersion = 1;

void save_recording(const Recording& rec, const fs::path& path) {
  std::string out;
  out.append(kRecMagic, 4);
  auto put_u32 = [&out](std::uint32_t v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(v));
  };
  put_u32(kRecVersion);
  put_u32(static_cast<std::uint32_t>(rec.frames.rows()));
  put_u32(static_cast<std::uint32_t>(rec.frames.cols()));
  out.append(reinterpret_cast<const char*>(rec.frames.data()),
             rec.frames.size() * sizeof(float));
  io::atomic_write_file(path, out);
}

Mat<float> load_recording_frames(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open recording: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string_view(magic, 4) != std::string_view(kRecMagic, 4))
    throw DataError("not a recording file: " + path.string());
  std::uint32_t version = 0, frames = 0, channels = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&frames), 4);
  in.read(reinterpret_cast<char*>(&channels), 4);
  if (!in || version != kRecVersion) throw DataError("bad recording header: " + path.string());
  Mat<float> m(frames, channels);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(m.size() * sizeof(float)));
  if (!in) throw DataError("recording truncated: " + path.string());
  return m;
}

ordered_json config_to_json(const CorpusConfig& cfg) {
  return ordered_json{{"n_subjects", cfg.n_subjects},
                      {"n_stimuli", cfg.n_stimuli},
                      {"stimulus_duration_s", cfg.stimulus_duration_s},
                      {"sample_rate_hz", cfg.sample_rate_hz},
                      {"n_channels", cfg.n_channels},
                      {"subject_mix_strength", cfg.subject_mix_strength},
                      {"content_source_count", cfg.content_source_count},
                      {"noise_std", cfg.noise_std},
                      {"seed", cfg.seed}};
}

CorpusConfig config_from_json(const nlohmann::json& j) {
  CorpusConfig cfg;
  cfg.n_subjects = j.at("n_subjects").get<int>();
  cfg.n_stimuli = j.at("n_stimuli").get<int>();
  cfg.stimulus_duration_s = j.at("stimulus_duration_s").get<double>();
  cfg.sample_rate_hz = j.at("sample_rate_hz").get<int>();
  cfg.n_channels = j.at("n_channels").get<int>();
  cfg.subject_mix_strength = j.at("subject_mix_strength").get<double>();
  cfg.content_source_count = j.at("content_source_count").get<int>();
  cfg.noise_std = j.at("noise_std").get<double>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

std::string recording_filename(int sequence_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "rec_%04d.fhvc", sequence_id);
  return buf;
}

}  // namespace

void save_corpus(const std::vector<Recording>& recordings, const CorpusConfig& cfg, int seg_len,
                 const std::string& dir) {
  if (recordings.empty()) throw DataError("save_corpus: empty corpus");
  fs::create_directories(dir);
  ordered_json meta;
  meta["format"] = "fhvae-corpus";
  meta["version"] = 1;
  meta["config"] = config_to_json(cfg);
  meta["seg_len"] = seg_len;

  LabelIndex index;
  segment_and_label(recordings, seg_len, index);

  ordered_json recs = ordered_json::array();
  for (const Recording& rec : recordings) {
    const int n_segments = static_cast<int>(rec.frames.rows()) / seg_len;
    SplitAssignment a = split_recording(n_segments);
    std::string file = recording_filename(rec.sequence_id);
    save_recording(rec, fs::path(dir) / file);
    recs.push_back(ordered_json{{"file", file},
                                {"sequence_id", rec.sequence_id},
                                {"subject_id", rec.subject_id},
                                {"stimulus_id", rec.stimulus_id},
                                {"n_frames", rec.frames.rows()},
                                {"n_segments", n_segments},
                                {"splits", ordered_json{{"train", a.train},
                                                        {"val", a.val},
                                                        {"test", a.test}}}});
  }
  meta["recordings"] = std::move(recs);
  ordered_json labels = ordered_json::array();
  for (int l = 0; l < index.n_labels(); ++l)
    labels.push_back(ordered_json{{"label_id", l},
                                  {"stimulus_id", index.key[l].first},
                                  {"offset", index.key[l].second},
                                  {"occurrences", index.occurrences[l]}});
  meta["labels"] = std::move(labels);
  io::atomic_write_file(fs::path(dir) / "corpus.json", meta.dump(2) + "\n");
}

std::vector<Recording> load_recordings(const std::string& dir, CorpusConfig& cfg, int& seg_len) {
  fs::path meta_path = fs::path(dir) / "corpus.json";
  std::ifstream in(meta_path);
  if (!in) throw IoError("cannot open corpus metadata: " + meta_path.string());
  nlohmann::json meta = nlohmann::json::parse(in, nullptr, true, true);
  if (meta.value("format", "") != "fhvae-corpus")
    throw DataError("not a corpus directory: " + dir);
  cfg = config_from_json(meta.at("config"));
  seg_len = meta.at("seg_len").get<int>();
  std::vector<Recording> out;
  for (const auto& r : meta.at("recordings")) {
    Recording rec;
    rec.sequence_id = r.at("sequence_id").get<int>();
    rec.subject_id = r.at("subject_id").get<int>();
    rec.stimulus_id = r.at("stimulus_id").get<int>();
    rec.frames = load_recording_frames(fs::path(dir) / r.at("file").get<std::string>());
    if (static_cast<int>(rec.frames.rows()) != r.at("n_frames").get<int>())
      throw DataError("corpus.json frame count disagrees with recording file");
    out.push_back(std::move(rec));
  }
  // Verify the stored label table and splits against the derivation rule, so
  // a partially edited corpus directory fails loudly.
  LabelIndex index;
  segment_and_label(out, seg_len, index);
  for (const auto& l : meta.at("labels")) {
    int id = l.at("label_id").get<int>();
    if (id < 0 || id >= index.n_labels() ||
        index.key[id] != std::make_pair(l.at("stimulus_id").get<int>(),
                                        l.at("offset").get<int>()) ||
        index.occurrences[id] != l.at("occurrences").get<int>())
      throw DataError("corpus.json label table does not match recordings");
  }
  for (const auto& r : meta.at("recordings")) {
    SplitAssignment a = split_recording(r.at("n_segments").get<int>());
    if (a.train != r.at("splits").at("train").get<std::vector<int>>() ||
        a.val != r.at("splits").at("val").get<std::vector<int>>() ||
        a.test != r.at("splits").at("test").get<std::vector<int>>())
      throw DataError("corpus.json splits do not match the split rule");
  }
  return out;
}

Dataset load_dataset(const std::string& dir) {
  CorpusConfig cfg;
  int seg_len = kDefaultSegLen;
  std::vector<Recording> recs = load_recordings(dir, cfg, seg_len);
  return build_dataset(recs, cfg, seg_len);
}

}  // namespace fhvae::corpus
