#include "updetr/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "updetr/error.hpp"

namespace updetr {

std::vector<DetectionSample> generate_dataset(std::size_t count, std::uint64_t seed, const SynthSpec& spec) {
  std::vector<DetectionSample> out(count);
  // Validate once up front so no exception escapes the parallel region.
  if (count > 0) out[0] = synth_image(derive_seed(seed, 0), spec);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 1; i < count; ++i) out[i] = synth_image(derive_seed(seed, i), spec);
  return out;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<DetectionSample>& samples) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError((dir / "images").string() + ": " + ec.message());
  std::ofstream manifest(dir / "manifest.txt"), truth(dir / "ground_truth.txt");
  if (!manifest || !truth) throw IoError(dir.string() + ": cannot write manifest");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%05zu.ppm", i);
    write_ppm(dir / name, samples[i].image);
    manifest << name << '\n';
    for (const auto& o : samples[i].objects) {
      char line[160];
      std::snprintf(line, sizeof line, "%s %zu %.6f %.6f %.6f %.6f\n", name, o.cls, o.box.cx, o.box.cy, o.box.w,
                    o.box.h);
      truth << line;
    }
  }
}

std::vector<DetectionSample> read_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError((dir / "manifest.txt").string() + ": cannot open manifest");
  std::vector<DetectionSample> out;
  std::map<std::string, std::size_t> index;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    index[line] = out.size();
    out.push_back({read_ppm(dir / line), {}});
  }
  std::ifstream truth(dir / "ground_truth.txt");
  if (!truth) return out;
  std::size_t lineno = 0;
  while (std::getline(truth, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string path;
    ObjectAnnotation o;
    if (!(ss >> path >> o.cls >> o.box.cx >> o.box.cy >> o.box.w >> o.box.h))
      throw InputError((dir / "ground_truth.txt").string() + ":" + std::to_string(lineno) + ": malformed line");
    const auto it = index.find(path);
    if (it == index.end())
      throw InputError((dir / "ground_truth.txt").string() + ":" + std::to_string(lineno) + ": " + path +
                       " is not in the manifest");
    out[it->second].objects.push_back(o);
  }
  return out;
}

}  // namespace updetr
