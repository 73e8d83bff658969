#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "updetr/pretext.hpp"

namespace updetr {

/// Scene i is synth_image(derive_seed(seed, i)); generated in parallel.
std::vector<DetectionSample> generate_dataset(std::size_t count, std::uint64_t seed, const SynthSpec& spec);

/// Writes images/NNNNN.ppm, manifest.txt (one relative path per line) and
/// ground_truth.txt (`image_path class cx cy w h`, 6 decimals).
void write_dataset(const std::filesystem::path& dir, const std::vector<DetectionSample>& samples);

/// Reads a manifest directory. ground_truth.txt is optional; without it
/// every sample has no objects.
std::vector<DetectionSample> read_dataset(const std::filesystem::path& dir);

}  // namespace updetr
