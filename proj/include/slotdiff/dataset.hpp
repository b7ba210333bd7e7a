#pragma once

#include "slotdiff/config.hpp"
#include "slotdiff/image_io.hpp"

// In-memory dataset loaded from a manifest directory. Images stay in their
// 8-bit form; batches convert to float on demand.

namespace slotdiff {

struct Dataset {
  int H = 0, W = 0, L = 1;  // L > 1 for clip datasets
  std::vector<SceneSample> samples;         // all frames, clip-major when L > 1
  std::vector<std::vector<SpriteSpec>> attributes;  // per sample (clip shares one)

  int64_t count() const { return L <= 1 ? int64_t(samples.size()) : int64_t(samples.size()) / L; }

  const SceneSample& frame(int64_t clip, int t) const { return samples[size_t(clip * L + t)]; }
};

inline Dataset load_dataset(const std::string& dir) {
  Manifest m = read_manifest(dir + "/manifest.txt");
  Dataset ds;
  ds.L = m.frames_per_sample;
  for (size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    SceneSample s;
    s.seed = e.seed;
    s.image = read_ppm(dir + "/" + e.image_path, s.H, s.W);
    int mh = 0, mw = 0;
    s.mask = read_pgm(dir + "/" + e.mask_path, mh, mw);
    if (mh != s.H || mw != s.W) throw std::runtime_error("dataset: image/mask size mismatch");
    ds.samples.push_back(std::move(s));
  }
  if (!ds.samples.empty()) {
    ds.H = ds.samples[0].H;
    ds.W = ds.samples[0].W;
  }
  int64_t n = ds.count();
  char buf[64];
  for (int64_t i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, "%s/att_%05lld.txt", dir.c_str(), (long long)i);
    ds.attributes.push_back(read_attributes(buf));
  }
  // attach attributes to frames so eval can reach categories
  return ds;
}

// Stacks `idx` samples into a [B,3,H,W] float batch in [0,1].
template <typename S>
Tensor<S> batch_images(const Dataset& ds, const std::vector<int64_t>& idx) {
  int B = int(idx.size());
  Tensor<S> out({B, 3, ds.H, ds.W});
  for (int b = 0; b < B; ++b) {
    const SceneSample& s = ds.samples[size_t(idx[size_t(b)])];
    for (int c = 0; c < 3; ++c)
      for (int64_t p = 0; p < int64_t(ds.H) * ds.W; ++p)
        out.data[((int64_t(b) * 3 + c) * ds.H * ds.W) + p] =
            S(s.image[size_t(p) * 3 + c]) / S(255);
  }
  return out;
}

// Mean per-pixel-channel variance of the dataset: the MSE of the best
// constant-image predictor, used as the reconstruction baseline.
inline double dataset_variance(const Dataset& ds) {
  double mean[3] = {0, 0, 0};
  int64_t n = 0;
  for (const auto& s : ds.samples) {
    for (size_t p = 0; p < s.mask.size(); ++p)
      for (int c = 0; c < 3; ++c) mean[c] += double(s.image[p * 3 + c]) / 255.0;
    n += int64_t(s.mask.size());
  }
  for (double& m : mean) m /= double(n);
  double var = 0;
  for (const auto& s : ds.samples)
    for (size_t p = 0; p < s.mask.size(); ++p)
      for (int c = 0; c < 3; ++c) {
        double d = double(s.image[p * 3 + c]) / 255.0 - mean[c];
        var += d * d;
      }
  return var / (double(n) * 3.0);
}

}  // namespace slotdiff
