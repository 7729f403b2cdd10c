#pragma once

#include <string>
#include <variant>

#include "mtz/model.hpp"

namespace mtz {

// Model container: magic "MTZM", u32 format version, a type tag, per-layer
// records with shape headers, little-endian doubles, trailing CRC32 over
// everything after the magic. Round trips are bit exact.

void save_model(const Network& net, const std::string& path);
void save_model(const ZippedModel& zm, const std::string& path);

using AnyModel = std::variant<Network, ZippedModel>;
AnyModel load_model(const std::string& path);

Network load_network(const std::string& path);
ZippedModel load_zipped(const std::string& path);

}  // namespace mtz
