#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "fhvae/corpus.hpp"
#include "fhvae/error.hpp"

using namespace fhvae;
using corpus::CorpusConfig;
using corpus::Recording;

namespace {

CorpusConfig small_config() {
  CorpusConfig cfg;
  cfg.n_subjects = 4;
  cfg.n_stimuli = 2;
  cfg.stimulus_duration_s = 64.0;
  cfg.sample_rate_hz = 64;
  cfg.n_channels = 8;
  cfg.seed = 1234;
  return cfg;
}

}  // namespace

TEST_CASE("generate_corpus: recording count and shape") {
  CorpusConfig cfg = small_config();
  auto recs = corpus::generate_corpus(cfg);
  CHECK(recs.size() == 8);  // n_subjects * n_stimuli
  std::set<int> seq_ids;
  for (const Recording& r : recs) {
    CHECK(r.frames.rows() == 4096);  // 64 s * 64 Hz
    CHECK(r.frames.cols() == 8);
    CHECK(seq_ids.insert(r.sequence_id).second);  // unique corpus-wide
  }
}

TEST_CASE("generate_corpus: zero noise and identical mixing give bit-identical parallels") {
  CorpusConfig cfg = small_config();
  cfg.noise_std = 0.0;
  cfg.subject_mix_strength = 0.0;
  auto recs = corpus::generate_corpus(cfg);
  const Recording* first_of_stim[2] = {nullptr, nullptr};
  for (const Recording& r : recs) {
    if (first_of_stim[r.stimulus_id] == nullptr) {
      first_of_stim[r.stimulus_id] = &r;
    } else {
      CHECK(r.frames == first_of_stim[r.stimulus_id]->frames);
    }
  }
}

TEST_CASE("generate_corpus: determinism byte-for-byte") {
  CorpusConfig cfg = small_config();
  auto a = corpus::generate_corpus(cfg);
  auto b = corpus::generate_corpus(cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].frames == b[i].frames);
}

TEST_CASE("generate_corpus: planted subject structure shifts channel means") {
  CorpusConfig cfg = small_config();
  cfg.subject_mix_strength = 1.0;
  auto recs = corpus::generate_corpus(cfg);
  // mean of channel 0 per subject on stimulus 0
  std::vector<double> means;
  for (const Recording& r : recs) {
    if (r.stimulus_id != 0) continue;
    double acc = 0;
    for (std::size_t t = 0; t < r.frames.rows(); ++t) acc += r.frames.at(t, 0);
    means.push_back(acc / static_cast<double>(r.frames.rows()));
  }
  REQUIRE(means.size() == 4);
  for (std::size_t i = 0; i < means.size(); ++i)
    for (std::size_t j = i + 1; j < means.size(); ++j)
      CHECK(std::abs(means[i] - means[j]) > 0.05);
}

TEST_CASE("generate_corpus: invalid configs rejected") {
  CorpusConfig cfg = small_config();
  cfg.n_subjects = 0;
  CHECK_THROWS_AS(corpus::generate_corpus(cfg), ConfigError);
  cfg = small_config();
  cfg.noise_std = -1.0;
  CHECK_THROWS_AS(corpus::generate_corpus(cfg), ConfigError);
}

TEST_CASE("segment_and_label: window count, labels, parallel sharing") {
  CorpusConfig cfg = small_config();
  cfg.n_subjects = 2;
  cfg.n_stimuli = 1;
  auto recs = corpus::generate_corpus(cfg);
  corpus::LabelIndex index;
  auto segs = corpus::segment_and_label(recs, 32, index);
  CHECK(segs.size() == 2 * 128);  // floor(4096/32) per recording
  CHECK(index.n_labels() == 128);
  for (int l = 0; l < index.n_labels(); ++l) CHECK(index.occurrences[l] == 2);
  // parallel recordings share label sequences element-wise
  for (int n = 0; n < 128; ++n) {
    CHECK(segs.label[n] == n);
    CHECK(segs.label[128 + n] == n);
  }
}

TEST_CASE("segment_and_label: trailing remainder dropped") {
  Recording rec;
  rec.sequence_id = 0;
  rec.subject_id = 0;
  rec.stimulus_id = 0;
  rec.frames.resize(33, 2);
  corpus::LabelIndex index;
  auto segs = corpus::segment_and_label({rec}, 32, index);
  CHECK(segs.size() == 1);
  CHECK(index.n_labels() == 1);
}

TEST_CASE("segment_and_label: empty input gives empty output") {
  corpus::LabelIndex index;
  auto segs = corpus::segment_and_label({}, 32, index);
  CHECK(segs.size() == 0);
  CHECK(index.n_labels() == 0);
}

TEST_CASE("split_recording: the 40/40/10/10 rule") {
  auto s = corpus::split_recording(100);
  REQUIRE(s.train.size() == 80);
  CHECK(s.train.front() == 0);
  CHECK(s.train[39] == 39);
  CHECK(s.train[40] == 60);
  CHECK(s.train.back() == 99);
  REQUIRE(s.val.size() == 10);
  CHECK(s.val.front() == 40);
  CHECK(s.val.back() == 49);
  REQUIRE(s.test.size() == 10);
  CHECK(s.test.front() == 50);
  CHECK(s.test.back() == 59);
}

TEST_CASE("split_recording: rounding sends leftovers to test") {
  auto s = corpus::split_recording(10);
  CHECK(s.train.size() == 8);
  CHECK(s.val.size() == 1);
  CHECK(s.test.size() == 1);
  auto s11 = corpus::split_recording(11);
  CHECK(s11.train.size() == 8);
  CHECK(s11.val.size() == 1);
  CHECK(s11.test.size() == 2);
}

TEST_CASE("split_recording: partition property over many sizes") {
  for (int n = 5; n < 200; ++n) {
    auto s = corpus::split_recording(n);
    std::set<int> all;
    for (int i : s.train) CHECK(all.insert(i).second);
    for (int i : s.val) CHECK(all.insert(i).second);
    for (int i : s.test) CHECK(all.insert(i).second);
    CHECK(static_cast<int>(all.size()) == n);
    CHECK(*all.begin() == 0);
    CHECK(*all.rbegin() == n - 1);
  }
}

TEST_CASE("split_recording: too few segments") {
  CHECK_THROWS_AS(corpus::split_recording(4), DataError);
}

TEST_CASE("normalize: constant channel maps to zeros, train stats become (0,1)") {
  CorpusConfig cfg = small_config();
  cfg.n_subjects = 2;
  cfg.n_stimuli = 1;
  auto recs = corpus::generate_corpus(cfg);
  // plant a constant channel
  for (auto& rec : recs)
    for (std::size_t t = 0; t < rec.frames.rows(); ++t) rec.frames.at(t, 3) = 7.5f;
  corpus::LabelIndex index;
  auto segs = corpus::segment_and_label(recs, 32, index);
  std::vector<std::uint8_t> use(segs.size(), 1);
  auto stats = corpus::compute_norm_stats(segs, use);
  corpus::normalize(segs, stats);
  for (std::size_t i = 0; i < segs.size(); ++i) {
    const float* d = segs.seg(i);
    for (int t = 0; t < 32; ++t) CHECK(d[t * 8 + 3] == 0.0f);
  }
  auto post = corpus::compute_norm_stats(segs, use);
  for (int c = 0; c < 8; ++c) {
    CHECK(std::abs(post.mean[c]) < 1e-6);
    if (c != 3) CHECK(std::abs(post.stddev[c] - 1.0) < 1e-3);
  }
}

TEST_CASE("normalize: applying stats twice is not the identity unless already normalized") {
  CorpusConfig cfg = small_config();
  cfg.n_subjects = 1;
  cfg.n_stimuli = 1;
  cfg.stimulus_duration_s = 8.0;
  auto recs = corpus::generate_corpus(cfg);
  corpus::LabelIndex index;
  auto segs = corpus::segment_and_label(recs, 32, index);
  std::vector<std::uint8_t> use(segs.size(), 1);
  auto stats = corpus::compute_norm_stats(segs, use);
  auto once = segs;
  corpus::normalize(once, stats);
  auto twice = once;
  corpus::normalize(twice, stats);
  bool same = true;
  for (std::size_t i = 0; i < once.data.size(); ++i)
    if (once.data[i] != twice.data[i]) same = false;
  CHECK_FALSE(same);
}

TEST_CASE("build_dataset: split partition and per-sequence train counts") {
  CorpusConfig cfg = small_config();
  auto recs = corpus::generate_corpus(cfg);
  auto ds = corpus::build_dataset(recs, cfg, 32);
  CHECK(ds.segments.size() == 8 * 128);
  CHECK(ds.train_segments.size() + ds.val_segments.size() + ds.test_segments.size() ==
        ds.segments.size());
  for (int s = 0; s < ds.n_sequences; ++s) CHECK(ds.train_count_per_sequence[s] == 102);
  // labels never cross splits: every label lives in exactly one split
  for (int l = 0; l < ds.labels.n_labels(); ++l) {
    std::set<corpus::Split> seen;
    for (std::size_t i = 0; i < ds.segments.size(); ++i)
      if (ds.segments.label[i] == l) seen.insert(ds.split[i]);
    CHECK(seen.size() == 1);
  }
}

TEST_CASE("corpus round trip through the directory format") {
  CorpusConfig cfg = small_config();
  cfg.n_subjects = 2;
  cfg.stimulus_duration_s = 8.0;
  auto recs = corpus::generate_corpus(cfg);
  auto dir = std::filesystem::temp_directory_path() / "fhvae_test_corpus";
  std::filesystem::remove_all(dir);
  corpus::save_corpus(recs, cfg, 32, dir.string());
  auto ds_disk = corpus::load_dataset(dir.string());
  auto ds_mem = corpus::build_dataset(recs, cfg, 32);
  REQUIRE(ds_disk.segments.size() == ds_mem.segments.size());
  CHECK(ds_disk.segments.data == ds_mem.segments.data);
  CHECK(ds_disk.segments.label == ds_mem.segments.label);
  CHECK(ds_disk.labels.occurrences == ds_mem.labels.occurrences);
  std::filesystem::remove_all(dir);
}
