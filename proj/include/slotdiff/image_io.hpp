#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "slotdiff/scene.hpp"

// Binary PPM (P6) / PGM (P5) image files plus the plain-text dataset
// manifest and attribute records.

namespace slotdiff {

inline void write_ppm(const std::string& path, const std::vector<uint8_t>& rgb, int H, int W) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  f << "P6\n" << W << " " << H << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb.data()), std::streamsize(rgb.size()));
  if (!f) throw std::runtime_error("write_ppm: write failed " + path);
}

inline void write_pgm(const std::string& path, const std::vector<uint8_t>& gray, int H, int W) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
  f << "P5\n" << W << " " << H << "\n255\n";
  f.write(reinterpret_cast<const char*>(gray.data()), std::streamsize(gray.size()));
  if (!f) throw std::runtime_error("write_pgm: write failed " + path);
}

namespace detail {
inline void read_pnm_header(std::ifstream& f, const std::string& path, const char* magic, int& H,
                            int& W) {
  std::string tag;
  f >> tag;
  if (tag != magic) throw std::runtime_error("read_pnm: bad magic in " + path);
  int maxval = 0;
  f >> W >> H >> maxval;
  if (!f || W <= 0 || H <= 0 || maxval != 255) throw std::runtime_error("read_pnm: bad header in " + path);
  f.get();  // single whitespace after header
}
}  // namespace detail

inline std::vector<uint8_t> read_ppm(const std::string& path, int& H, int& W) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
  detail::read_pnm_header(f, path, "P6", H, W);
  std::vector<uint8_t> data(size_t(H) * W * 3);
  f.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size()));
  if (!f) throw std::runtime_error("read_ppm: truncated " + path);
  return data;
}

inline std::vector<uint8_t> read_pgm(const std::string& path, int& H, int& W) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_pgm: cannot open " + path);
  detail::read_pnm_header(f, path, "P5", H, W);
  std::vector<uint8_t> data(size_t(H) * W);
  f.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size()));
  if (!f) throw std::runtime_error("read_pgm: truncated " + path);
  return data;
}

// One line per sprite:
//   kind r g b x_q y_q sx_q sy_q vx_q vy_q category depth
// poses in fixed-point 1/256 units so records round-trip exactly.
inline void write_attributes(const std::string& path, const std::vector<SpriteSpec>& sprites) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_attributes: cannot open " + path);
  for (const auto& s : sprites) {
    f << int(s.kind) << " " << int(s.color[0]) << " " << int(s.color[1]) << " " << int(s.color[2])
      << " " << s.pos_q[0] << " " << s.pos_q[1] << " " << s.scale_q[0] << " " << s.scale_q[1]
      << " " << s.vel_q[0] << " " << s.vel_q[1] << " " << s.category << " " << s.depth << "\n";
  }
  if (!f) throw std::runtime_error("write_attributes: write failed " + path);
}

inline std::vector<SpriteSpec> read_attributes(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_attributes: cannot open " + path);
  std::vector<SpriteSpec> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    SpriteSpec s;
    int kind, r, g, b;
    ss >> kind >> r >> g >> b >> s.pos_q[0] >> s.pos_q[1] >> s.scale_q[0] >> s.scale_q[1] >>
        s.vel_q[0] >> s.vel_q[1] >> s.category >> s.depth;
    if (!ss) throw std::runtime_error("read_attributes: bad record in " + path);
    s.kind = SpriteKind(kind);
    s.color = {uint8_t(r), uint8_t(g), uint8_t(b)};
    out.push_back(s);
  }
  return out;
}

struct ManifestEntry {
  std::string image_path;  // relative
  std::string mask_path;
  uint64_t seed = 0;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  int frames_per_sample = 1;  // >1 for video datasets, consecutive lines group
};

inline void write_manifest(const std::string& path, const Manifest& m) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_manifest: cannot open " + path);
  f << "# frames_per_sample " << m.frames_per_sample << "\n";
  for (const auto& e : m.entries) f << e.image_path << " " << e.mask_path << " " << e.seed << "\n";
  if (!f) throw std::runtime_error("write_manifest: write failed " + path);
}

inline Manifest read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_manifest: cannot open " + path);
  Manifest m;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ss(line.substr(1));
      std::string key;
      ss >> key;
      if (key == "frames_per_sample") ss >> m.frames_per_sample;
      continue;
    }
    std::istringstream ss(line);
    ManifestEntry e;
    ss >> e.image_path >> e.mask_path >> e.seed;
    if (!ss) throw std::runtime_error("read_manifest: bad line in " + path);
    m.entries.push_back(e);
  }
  return m;
}

// Writes images/masks/attributes for a batch of samples and returns the
// manifest (already written to dir/manifest.txt).
inline Manifest export_dataset(const std::vector<SceneSample>& samples, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("export_dataset: cannot create " + dir);
  Manifest m;
  char buf[64];
  for (size_t i = 0; i < samples.size(); ++i) {
    const SceneSample& s = samples[i];
    std::snprintf(buf, sizeof buf, "img_%05zu.ppm", i);
    std::string img = buf;
    std::snprintf(buf, sizeof buf, "msk_%05zu.pgm", i);
    std::string msk = buf;
    std::snprintf(buf, sizeof buf, "att_%05zu.txt", i);
    std::string att = buf;
    write_ppm(dir + "/" + img, s.image, s.H, s.W);
    write_pgm(dir + "/" + msk, s.mask, s.H, s.W);
    write_attributes(dir + "/" + att, s.sprites);
    m.entries.push_back({img, msk, s.seed});
  }
  write_manifest(dir + "/manifest.txt", m);
  return m;
}

// Video datasets are stored frame-per-line; frames_per_sample in the
// manifest header groups them back into clips.
inline Manifest export_video_dataset(const std::vector<VideoSample>& clips, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("export_video_dataset: cannot create " + dir);
  Manifest m;
  char buf[64];
  for (size_t i = 0; i < clips.size(); ++i) {
    const VideoSample& v = clips[i];
    if (!m.entries.empty() && m.frames_per_sample != v.L)
      throw std::runtime_error("export_video_dataset: mixed clip lengths");
    m.frames_per_sample = v.L;
    std::snprintf(buf, sizeof buf, "att_%05zu.txt", i);
    write_attributes(dir + "/" + std::string(buf), v.sprites);
    for (int t = 0; t < v.L; ++t) {
      SceneSample fr = v.frame(t);
      std::snprintf(buf, sizeof buf, "img_%05zu_f%d.ppm", i, t);
      std::string img = buf;
      std::snprintf(buf, sizeof buf, "msk_%05zu_f%d.pgm", i, t);
      std::string msk = buf;
      write_ppm(dir + "/" + img, fr.image, v.H, v.W);
      write_pgm(dir + "/" + msk, fr.mask, v.H, v.W);
      m.entries.push_back({img, msk, v.seed});
    }
  }
  write_manifest(dir + "/manifest.txt", m);
  return m;
}

}  // namespace slotdiff
