// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "fixtures.hpp"
#include "grade/capture.hpp"

using namespace grade;
using fixture::kind_of;
namespace fs = std::filesystem;

namespace {

CaptureRecord minimal_record() {
  CaptureRecord r;
  r.sample_id = "s0";
  LayerCapture lc;
  lc.h = MatrixF::Zero(1, 1);
  lc.delta = MatrixF::Zero(1, 1);
  r.layers.push_back(lc);
  return r;
}

std::string bytes_of(const CaptureRecord& r) {
  std::ostringstream out(std::ios::binary);
  write_capture(r, out);
  return out.str();
}

std::string le32(std::uint32_t v) {
  std::string s;
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  return s;
}

}  // namespace

TEST(CaptureFormat, MinimalRecordBytes) {
  const std::string got = bytes_of(minimal_record());
  std::string want = "GRDC";
  for (std::uint32_t v : {1u, 1u, 0u, 1u, 1u, 1u, 0u, 0u}) want += le32(v);
  ASSERT_EQ(got.size(), 36u);
  EXPECT_EQ(got, want);
}

TEST(CaptureFormat, PayloadIsLittleEndianF32RowMajor) {
  CaptureRecord r = minimal_record();
  r.layers[0].h = MatrixF(1, 2);
  r.layers[0].h << 1.0f, -2.5f;
  r.layers[0].delta = MatrixF::Constant(1, 1, 0.5f);
  const std::string got = bytes_of(r);
  ASSERT_EQ(got.size(), 40u);
  // 1.0f = 0x3f800000, -2.5f = 0xc0200000, 0.5f = 0x3f000000
  EXPECT_EQ(got.substr(28, 4), le32(0x3f800000u));
  EXPECT_EQ(got.substr(32, 4), le32(0xc0200000u));
  EXPECT_EQ(got.substr(36, 4), le32(0x3f000000u));
}

TEST(CaptureFormat, RoundTripRandomRecordsIsBitwise) {
  Rng rng(2024);
  for (int i = 0; i < 200; ++i) {
    const CaptureRecord r = fixture::random_record(rng, "r" + std::to_string(i));
    std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
    const std::size_t written = write_capture(r, buf);
    EXPECT_EQ(written, buf.str().size());
    const CaptureRecord back = read_capture(buf, static_cast<std::uint32_t>(r.num_layers()));
    ASSERT_EQ(back.layers.size(), r.layers.size());
    for (std::size_t l = 0; l < r.layers.size(); ++l) {
      const auto& a = r.layers[l];
      const auto& b = back.layers[l];
      ASSERT_EQ(a.h.rows(), b.h.rows());
      ASSERT_EQ(a.h.cols(), b.h.cols());
      ASSERT_EQ(a.delta.cols(), b.delta.cols());
      EXPECT_EQ(std::memcmp(a.h.data(), b.h.data(), sizeof(float) * static_cast<std::size_t>(a.h.size())), 0);
      EXPECT_EQ(std::memcmp(a.delta.data(), b.delta.data(),
                            sizeof(float) * static_cast<std::size_t>(a.delta.size())), 0);
    }
  }
}

TEST(CaptureFormat, WriterIsDeterministic) {
  Rng a(7), b(7);
  for (int i = 0; i < 20; ++i) {
    EXPECT_EQ(bytes_of(fixture::random_record(a, "x")), bytes_of(fixture::random_record(b, "x")));
  }
}

TEST(CaptureFormat, BadMagicIsFormatError) {
  std::string bytes = bytes_of(minimal_record());
  bytes[3] = 'X';
  std::istringstream in(bytes);
  EXPECT_EQ(kind_of([&] { read_capture(in); }), ErrorKind::kFormat);
}

TEST(CaptureFormat, UnknownVersionIsFormatError) {
  std::string bytes = bytes_of(minimal_record());
  bytes.replace(4, 4, le32(2));
  std::istringstream in(bytes);
  EXPECT_EQ(kind_of([&] { read_capture(in); }), ErrorKind::kFormat);
}

TEST(CaptureFormat, EveryTruncationIsDetected) {
  Rng rng(3);
  const std::string bytes = bytes_of(fixture::random_record(rng, "t"));
  for (std::size_t cut = 0; cut < bytes.size(); ++cut) {
    std::istringstream in(bytes.substr(0, cut));
    EXPECT_EQ(kind_of([&] { read_capture(in); }), ErrorKind::kTruncated) << "cut at " << cut;
  }
}

TEST(CaptureFormat, HugeDeclaredShapeIsTruncatedNotAllocated) {
  std::string bytes = bytes_of(minimal_record());
  bytes.replace(16, 4, le32(0x7fffffffu));
  std::istringstream in(bytes);
  EXPECT_EQ(kind_of([&] { read_capture(in); }), ErrorKind::kTruncated);
}

TEST(CaptureFormat, NanPayloadIsCorruptTensor) {
  std::string bytes = bytes_of(minimal_record());
  bytes.replace(28, 4, le32(0x7fc00000u));
  std::istringstream in(bytes);
  EXPECT_EQ(kind_of([&] { read_capture(in); }), ErrorKind::kCorruptTensor);

  CaptureRecord r = minimal_record();
  r.layers[0].delta(0, 0) = std::numeric_limits<float>::infinity();
  std::ostringstream sink;
  EXPECT_EQ(kind_of([&] { write_capture(r, sink); }), ErrorKind::kCorruptTensor);
  EXPECT_TRUE(sink.str().empty());
}

TEST(CaptureFormat, LayerCountMismatch) {
  Rng rng(9);
  CaptureRecord r = minimal_record();
  r.layers = fixture::random_layers(rng, 3, 2, 4, 3);
  const std::string bytes = bytes_of(r);
  std::istringstream in(bytes);
  EXPECT_EQ(kind_of([&] { read_capture(in, 4u); }), ErrorKind::kLayerCountMismatch);
}

TEST(CaptureValidate, RejectsBrokenRecords) {
  Rng rng(1);
  CaptureRecord r = minimal_record();
  r.layers = fixture::random_layers(rng, 2, 3, 4, 5);
  EXPECT_NO_THROW(validate(r));

  CaptureRecord bad = r;
  bad.sample_id.clear();
  EXPECT_EQ(kind_of([&] { validate(bad); }), ErrorKind::kInvalidInput);

  bad = r;
  bad.layers[1].delta = fixture::random_f32(rng, 2, 5);
  EXPECT_EQ(kind_of([&] { validate(bad); }), ErrorKind::kShapeMismatch);

  bad = r;
  bad.layers[1].layer_index = 5;
  EXPECT_EQ(kind_of([&] { validate(bad); }), ErrorKind::kInvalidInput);

  bad = r;
  bad.tokens = {"a", "b", "c", "d"};
  EXPECT_EQ(kind_of([&] { validate(bad); }), ErrorKind::kInvalidInput);

  bad = r;
  bad.tokens = {"a", "b", "c"};
  bad.step_boundaries = {0, 2, 1};
  EXPECT_EQ(kind_of([&] { validate(bad); }), ErrorKind::kInvalidInput);

  bad = r;
  bad.accuracy_over_samples = 1.5;
  EXPECT_EQ(kind_of([&] { validate(bad); }), ErrorKind::kInvalidInput);
}

TEST(CaptureSteps, SpanAndPrefixLength) {
  Rng rng(4);
  CaptureRecord r = minimal_record();
  r.layers = fixture::random_layers(rng, 1, 7, 2, 2);
  r.tokens = {"a", "b", "c", "d", "e"};
  r.step_boundaries = {0, 2, 4};
  EXPECT_EQ(step_span(r, 0).begin, 0);
  EXPECT_EQ(step_span(r, 0).end, 2);
  EXPECT_EQ(step_span(r, 2).end, 5);
  EXPECT_EQ(step_prefix_length(r, 0), 4);
  EXPECT_EQ(step_prefix_length(r, 1), 6);
  EXPECT_EQ(step_prefix_length(r, 2), 7);
  EXPECT_EQ(kind_of([&] { step_span(r, 3); }), ErrorKind::kInvalidInput);
}

TEST(Sidecar, KeysAndRoundTrip) {
  Rng rng(12);
  for (int i = 0; i < 50; ++i) {
    const CaptureRecord r = fixture::random_record(rng, "side" + std::to_string(i));
    const auto j = sidecar_json(r);
    EXPECT_EQ(j.size(), 9u);
    CaptureRecord back;
    apply_sidecar(nlohmann::json::parse(j.dump()), back);
    EXPECT_EQ(back.sample_id, r.sample_id);
    EXPECT_EQ(back.objective, r.objective);
    EXPECT_EQ(back.tokens, r.tokens);
    EXPECT_EQ(back.step_boundaries, r.step_boundaries);
    EXPECT_EQ(back.loss_value, r.loss_value);
    EXPECT_EQ(back.label, r.label);
    EXPECT_EQ(back.accuracy_over_samples, r.accuracy_over_samples);
    EXPECT_EQ(back.dataset_name, r.dataset_name);
    EXPECT_EQ(back.paraphrase_group, r.paraphrase_group);
  }
}

TEST(Sidecar, UnknownOrMissingKeyIsFormatError) {
  auto j = sidecar_json(minimal_record());
  CaptureRecord r;
  auto extra = j;
  extra["surprise"] = 1;
  EXPECT_EQ(kind_of([&] { apply_sidecar(extra, r); }), ErrorKind::kFormat);
  auto missing = j;
  missing.erase("label");
  EXPECT_EQ(kind_of([&] { apply_sidecar(missing, r); }), ErrorKind::kFormat);
  auto wrong_type = j;
  wrong_type["loss_value"] = "high";
  EXPECT_EQ(kind_of([&] { apply_sidecar(wrong_type, r); }), ErrorKind::kFormat);
}

TEST(Manifest, ParseRejectsDuplicatesAndOverlaps) {
  DatasetManifest m;
  m.model_name = "m";
  m.num_layers = 2;
  m.records = {{"a", "x.grdc", 0, 10}, {"b", "x.grdc", 10, 5}};
  EXPECT_EQ(parse_manifest(manifest_json(m)), m);

  auto dup = m;
  dup.records[1].sample_id = "a";
  EXPECT_EQ(kind_of([&] { parse_manifest(manifest_json(dup)); }), ErrorKind::kDuplicateId);

  auto overlap = m;
  overlap.records[1].offset = 9;
  EXPECT_EQ(kind_of([&] { parse_manifest(manifest_json(overlap)); }), ErrorKind::kFormat);

  auto version = manifest_json(m);
  version["format_version"] = 9;
  EXPECT_EQ(kind_of([&] { parse_manifest(version); }), ErrorKind::kFormat);
}

TEST(Manifest, FileStemIsFilesystemSafe) {
  EXPECT_EQ(file_stem_for("abc-1_2.x"), "abc-1_2.x");
  EXPECT_EQ(file_stem_for("a/b c"), "a_b_c");
  EXPECT_EQ(file_stem_for(".hidden"), "_.hidden");
  EXPECT_EQ(file_stem_for(""), "_");
}

TEST(Manifest, ScanEmptyDirectory) {
  fixture::TempDir dir("scan-empty");
  const auto m = scan_manifest(dir.path());
  EXPECT_TRUE(m.records.empty());
  EXPECT_EQ(m.num_layers, 0u);
}

TEST(Manifest, ScanSortsBySampleId) {
  fixture::TempDir dir("scan-three");
  Rng rng(5);
  for (const char* id : {"c", "a", "b"}) {
    CaptureRecord r = minimal_record();
    r.sample_id = id;
    r.layers = fixture::random_layers(rng, 2, 3, 4, 2);
    write_record_files(dir.path(), r);
  }
  const auto m = scan_manifest(dir.path());
  ASSERT_EQ(m.records.size(), 3u);
  EXPECT_EQ(m.records[0].sample_id, "a");
  EXPECT_EQ(m.records[1].sample_id, "b");
  EXPECT_EQ(m.records[2].sample_id, "c");
  EXPECT_EQ(m.num_layers, 2u);
  for (const auto& e : m.records) {
    EXPECT_EQ(e.offset, 0u);
    EXPECT_EQ(e.length, fs::file_size(dir.path() / e.file));
  }
}

TEST(Manifest, ScanDetectsDuplicateIds) {
  fixture::TempDir dir("scan-dup");
  CaptureRecord r = minimal_record();
  r.sample_id = "same";
  write_record_files(dir.path(), r);
  fs::copy_file(dir.path() / "same.grdc", dir.path() / "other.grdc");
  fs::copy_file(dir.path() / "same.json", dir.path() / "other.json");
  EXPECT_EQ(kind_of([&] { scan_manifest(dir.path()); }), ErrorKind::kDuplicateId);
}

TEST(Manifest, ScanDetectsLayerCountMismatch) {
  fixture::TempDir dir("scan-layers");
  Rng rng(6);
  CaptureRecord a = minimal_record();
  a.sample_id = "a";
  a.layers = fixture::random_layers(rng, 4, 2, 2, 2);
  CaptureRecord b = minimal_record();
  b.sample_id = "b";
  b.layers = fixture::random_layers(rng, 3, 2, 2, 2);
  write_record_files(dir.path(), a);
  write_record_files(dir.path(), b);
  EXPECT_EQ(kind_of([&] { scan_manifest(dir.path()); }), ErrorKind::kLayerCountMismatch);
}

TEST(Dataset, WriteThenLoadPreservesEveryField) {
  fixture::TempDir dir("dataset");
  Rng rng(77);
  std::vector<CaptureRecord> records;
  CaptureRecord first = fixture::random_record(rng, "id-00");
  const int layers = first.num_layers();
  records.push_back(first);
  while (records.size() < 12) {
    CaptureRecord r = fixture::random_record(rng, "id-" + std::to_string(records.size() + 10));
    if (r.num_layers() == layers) records.push_back(r);
  }
  const auto m = write_dataset(dir.path(), records, "toy");
  EXPECT_EQ(m.records.size(), records.size());
  EXPECT_EQ(load_manifest(dir.path()), m);
  EXPECT_EQ(scan_manifest(dir.path()), m);

  const auto loaded = load_dataset(dir.path());
  ASSERT_EQ(loaded.size(), records.size());
  for (const auto& r : loaded) {
    const auto it = std::find_if(records.begin(), records.end(),
                                 [&](const CaptureRecord& x) { return x.sample_id == r.sample_id; });
    ASSERT_NE(it, records.end());
    EXPECT_EQ(r, *it);
  }
}

TEST(Dataset, StaleManifestIsRejected) {
  fixture::TempDir dir("stale");
  CaptureRecord r = minimal_record();
  write_dataset(dir.path(), {r}, "toy");
  CaptureRecord extra = minimal_record();
  extra.sample_id = "s1";
  write_record_files(dir.path(), extra);
  EXPECT_EQ(kind_of([&] { scan_manifest(dir.path()); }), ErrorKind::kFormat);
}

TEST(Dataset, CollidingStemsAreRejected) {
  fixture::TempDir dir("collide");
  CaptureRecord a = minimal_record();
  a.sample_id = "a/b";
  CaptureRecord b = minimal_record();
  b.sample_id = "a_b";
  EXPECT_EQ(kind_of([&] { write_dataset(dir.path(), {a, b}, "toy"); }), ErrorKind::kDuplicateId);
}

TEST(Dataset, WithoutManifestFallsBackToScan) {
  fixture::TempDir dir("noman");
  Rng rng(8);
  CaptureRecord r = fixture::random_record(rng, "only");
  write_record_files(dir.path(), r);
  const auto loaded = load_dataset(dir.path());
  ASSERT_EQ(loaded.size(), 1u);
  EXPECT_EQ(loaded[0], r);
}
