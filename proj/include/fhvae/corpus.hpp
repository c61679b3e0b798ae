#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fhvae/mat.hpp"

namespace fhvae::corpus {

inline constexpr int kDefaultSegLen = 32;
inline constexpr double kNormStdFloor = 1e-8;

struct CorpusConfig {
  int n_subjects = 4;
  int n_stimuli = 2;
  double stimulus_duration_s = 64.0;
  int sample_rate_hz = 64;
  int n_channels = 8;
  double subject_mix_strength = 1.0;
  int content_source_count = 4;
  double noise_std = 0.05;
  std::uint64_t seed = 0;
};

void validate(const CorpusConfig& cfg);  // throws ConfigError

// One uninterrupted multichannel sequence: one subject hearing one stimulus.
struct Recording {
  int sequence_id = 0;
  int subject_id = 0;
  int stimulus_id = 0;
  Mat<float> frames;  // T x C
};

// Synthetic parallel corpus. Every stimulus has shared band-limited source
// signals; every subject has a fixed mixing perturbation and channel offset
// scaled by subject_mix_strength. Streams are keyed by (seed, subject,
// stimulus), so generation order does not matter and equal seeds give
// byte-identical corpora.
std::vector<Recording> generate_corpus(const CorpusConfig& cfg);

// Non-overlapping fixed-length windows; the trailing remainder is dropped.
// Content labels are dense integers keyed by (stimulus, window offset), so
// parallel recordings share label sequences.
struct SegmentSet {
  int seg_len = 0, channels = 0;
  std::vector<float> data;  // [segment][frame][channel]
  std::vector<int> sequence_id, subject_id, stimulus_id, label, offset;

  std::size_t size() const { return sequence_id.size(); }
  float* seg(std::size_t i) { return data.data() + i * static_cast<std::size_t>(seg_len) * channels; }
  const float* seg(std::size_t i) const {
    return data.data() + i * static_cast<std::size_t>(seg_len) * channels;
  }
  std::size_t seg_floats() const { return static_cast<std::size_t>(seg_len) * channels; }
};

struct LabelIndex {
  std::vector<std::pair<int, int>> key;  // label -> (stimulus, offset)
  std::vector<int> occurrences;          // S(l)
  int n_labels() const { return static_cast<int>(key.size()); }
};

SegmentSet segment_and_label(const std::vector<Recording>& recordings, int seg_len,
                             LabelIndex& index);

// First and last 40% train; the middle 20% is split into validation then
// test, with rounding leftovers going to test.
struct SplitAssignment {
  std::vector<int> train, val, test;
};

SplitAssignment split_recording(int n_segments);  // throws DataError if < 5

struct NormStats {
  std::vector<double> mean, stddev;  // per channel; stddev floored
};

NormStats compute_norm_stats(const SegmentSet& segments, const std::vector<std::uint8_t>& use);
void normalize(SegmentSet& segments, const NormStats& stats);

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

// Fully prepared dataset: segmented, split, normalized, with the per-sequence
// and per-label counts the objective needs.
struct Dataset {
  CorpusConfig config;
  int seg_len = kDefaultSegLen;
  SegmentSet segments;  // normalized
  LabelIndex labels;
  std::vector<Split> split;  // per segment
  std::vector<int> train_segments, val_segments, test_segments;
  int n_sequences = 0;
  std::vector<int> train_count_per_sequence;  // N(i), training segments only
  std::vector<int> subject_of_sequence, stimulus_of_sequence;
  std::vector<int> train_labels;                     // labels with training segments
  std::vector<std::vector<int>> train_segments_of_label;  // indexed by label
  NormStats norm;
};

Dataset build_dataset(const std::vector<Recording>& recordings, const CorpusConfig& cfg,
                      int seg_len = kDefaultSegLen);

// Corpus directory: corpus.json plus one FHVC file per recording
// (magic "FHVC", version u32, T u32, C u32, row-major little-endian float32).
void save_corpus(const std::vector<Recording>& recordings, const CorpusConfig& cfg, int seg_len,
                 const std::string& dir);
std::vector<Recording> load_recordings(const std::string& dir, CorpusConfig& cfg, int& seg_len);
Dataset load_dataset(const std::string& dir);

}  // namespace fhvae::corpus
