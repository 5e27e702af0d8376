#pragma once

#include <array>
#include <compare>
#include <stdexcept>
#include <string>
#include <vector>

#include "gcnas/modules.hpp"

namespace gcnas {

using LayerMask = std::array<bool, kModulesPerLayer>;

// L × n module selection; the genotype of a subnet.
struct SubnetMask {
  std::vector<LayerMask> select;

  static SubnetMask all(std::size_t layers, bool value) {
    LayerMask row;
    row.fill(value);
    return {std::vector<LayerMask>(layers, row)};
  }

  std::size_t layers() const { return select.size(); }

  std::size_t count(std::size_t layer) const {
    std::size_t c = 0;
    for (bool b : select.at(layer)) c += b ? 1 : 0;
    return c;
  }

  // First layer index (0-based) where this mask selects something outside
  // `allowed`, or -1 when contained.
  int first_violation(const SubnetMask& allowed) const {
    if (allowed.layers() != layers()) return 0;
    for (std::size_t l = 0; l < layers(); ++l)
      for (std::size_t j = 0; j < kModulesPerLayer; ++j)
        if (select[l][j] && !allowed.select[l][j]) return static_cast<int>(l);
    return -1;
  }
  bool contained_in(const SubnetMask& allowed) const { return first_violation(allowed) < 0; }

  // "110100|000011|..." with one group of n bits per layer.
  std::string str() const {
    std::string s;
    for (std::size_t l = 0; l < layers(); ++l) {
      if (l) s += '|';
      for (bool b : select[l]) s += b ? '1' : '0';
    }
    return s;
  }

  static SubnetMask parse(const std::string& s) {
    SubnetMask m;
    LayerMask row{};
    std::size_t j = 0;
    for (char c : s) {
      if (c == '|') {
        if (j != kModulesPerLayer) throw std::invalid_argument("mask layer has wrong width: " + s);
        m.select.push_back(row);
        row = {};
        j = 0;
      } else if (c == '0' || c == '1') {
        if (j >= kModulesPerLayer) throw std::invalid_argument("mask layer has wrong width: " + s);
        row[j++] = c == '1';
      } else {
        throw std::invalid_argument("bad mask character in: " + s);
      }
    }
    if (j != kModulesPerLayer) throw std::invalid_argument("mask layer has wrong width: " + s);
    m.select.push_back(row);
    return m;
  }

  auto operator<=>(const SubnetMask&) const = default;
  bool operator==(const SubnetMask&) const = default;
};

class ContainmentError : public std::invalid_argument {
 public:
  ContainmentError(std::size_t layer, const std::string& what)
      : std::invalid_argument(what), layer_(layer) {}
  std::size_t layer() const { return layer_; }

 private:
  std::size_t layer_;
};

}  // namespace gcnas
