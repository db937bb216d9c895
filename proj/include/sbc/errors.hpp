#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace sbc {

// Shape or size disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of an operation (b <= 0, alpha <= 0, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Caller violated an API contract (non-scalar loss, r off the simplex, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Malformed or truncated file. `offset` is the byte position where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Training produced a non-finite loss or gradient.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Pruning would leave a layer without weights. Carries survivors per layer.
class PruneError : public std::runtime_error {
 public:
  PruneError(const std::string& what, std::vector<std::size_t> survivors)
      : std::runtime_error(what), survivors_(std::move(survivors)) {}
  const std::vector<std::size_t>& survivors() const noexcept { return survivors_; }

 private:
  std::vector<std::size_t> survivors_;
};

}  // namespace sbc
