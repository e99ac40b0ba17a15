#pragma once

// Corpus loading and training-pair sampling: 192px HR crops, a uniform
// dihedral transform applied before degradation, LQ generated on the fly.

#include <algorithm>
#include <filesystem>
#include <vector>

#include "s2sr/degrade.hpp"
#include "s2sr/png_io.hpp"

namespace s2sr {

constexpr int64_t kTrainPatch = 192;

struct TrainSample {
  ImageU8 hr;        // 192 x 192
  ImageU8 lq;        // (192/r) x (192/r), degraded from the transformed hr
  int dihedral_op = 0;
};

inline std::vector<ImageU8> load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    auto p = e.path().string();
    if (ends_with(p, ".png") || ends_with(p, ".ppm")) files.push_back(p);
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .png/.ppm images in " + dir);
  std::vector<ImageU8> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(read_image(f));
  return out;
}

// Drops images smaller than the training patch, with a warning per image.
inline std::vector<ImageU8> filter_trainable(std::vector<ImageU8> corpus) {
  std::vector<ImageU8> out;
  for (auto& img : corpus) {
    if (img.height < kTrainPatch || img.width < kTrainPatch) {
      std::fprintf(stderr, "warning: skipping %lldx%lld image (smaller than %lldpx patch)\n",
                   (long long)img.height, (long long)img.width, (long long)kTrainPatch);
      continue;
    }
    out.push_back(std::move(img));
  }
  return out;
}

inline ImageU8 crop_image(const ImageU8& img, int64_t top, int64_t left, int64_t h, int64_t w) {
  if (top < 0 || left < 0 || top + h > img.height || left + w > img.width)
    throw UsageError("crop out of bounds");
  ImageU8 out(h, w);
  for (int64_t y = 0; y < h; ++y)
    std::memcpy(&out.px[size_t(y * w * 3)], &img.px[size_t(((top + y) * img.width + left) * 3)],
                size_t(w * 3));
  return out;
}

// Uniform random crops with independent dihedral transforms; deterministic
// under the generator state. Transform first, then degrade.
inline std::vector<TrainSample> sample_batch(const std::vector<ImageU8>& corpus,
                                             int64_t batch_size, int64_t r, int quality,
                                             Rng& rng) {
  std::vector<const ImageU8*> eligible;
  for (const auto& img : corpus)
    if (img.height >= kTrainPatch && img.width >= kTrainPatch) eligible.push_back(&img);
  if (eligible.empty()) throw UsageError("no corpus image is >= 192x192");

  std::vector<TrainSample> out;
  out.reserve(size_t(batch_size));
  for (int64_t i = 0; i < batch_size; ++i) {
    const ImageU8& img = *eligible[size_t(rng.uniform_int(int64_t(eligible.size())))];
    int64_t top = rng.uniform_int(img.height - kTrainPatch + 1);
    int64_t left = rng.uniform_int(img.width - kTrainPatch + 1);
    int op = int(rng.uniform_int(8));
    TrainSample s;
    s.dihedral_op = op;
    s.hr = dihedral_apply(crop_image(img, top, left, kTrainPatch, kTrainPatch), op);
    s.lq = degrade(s.hr, r, quality);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace s2sr
