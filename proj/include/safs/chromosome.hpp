#pragma once

#include <string>
#include <vector>

#include "safs/activations.hpp"

namespace safs::search {

// One operator per hidden activation layer, input side first.
struct Chromosome {
  std::vector<activations::OperatorId> genes;

  std::size_t size() const noexcept { return genes.size(); }
  friend bool operator==(const Chromosome&, const Chromosome&) = default;

  std::string str() const {
    std::string s;
    for (std::size_t i = 0; i < genes.size(); ++i) {
      if (i) s += ',';
      s += activations::to_string(genes[i]);
    }
    return s;
  }
};

inline Chromosome uniform_chromosome(std::size_t length, activations::OperatorId op) {
  return {std::vector<activations::OperatorId>(length, op)};
}

}  // namespace safs::search
