#pragma once

#include <string>
#include <utility>
#include <vector>

#include "eeguq/decoder.hpp"
#include "eeguq/tensor.hpp"

namespace eeguq {

/// Generic model container, magic "UNCM": a section tag, a config text
/// block, and named f64 tensors. Round trips are bit-exact.
struct Checkpoint {
    std::string section;
    std::string config_text;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

void save_decoder(DecoderModel& model, const std::string& path);
DecoderModel load_decoder(const std::string& path);

}  // namespace eeguq
