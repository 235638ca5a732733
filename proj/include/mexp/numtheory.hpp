#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mexp/error.hpp"

// Exact integer number theory. Everything here is a pure function, and
// modpow is the ground truth every dataset and evaluation is checked against.
namespace mexp::numtheory {

/// a^b mod c by square-and-multiply with 128-bit intermediates. 0^0 = 1.
/// Throws DomainError when c == 0.
std::uint64_t modpow(std::uint64_t a, std::uint64_t b, std::uint64_t c);

/// Smallest prime dividing n; 1 for n == 1.
std::uint64_t lowest_prime_factor(std::uint64_t n);

/// Deterministic trial division up to sqrt(n).
bool is_prime(std::uint64_t n);

std::uint64_t divisor_count(std::uint64_t n);

/// Euler's phi.
std::uint64_t totient(std::uint64_t n);

/// Distinct prime factors in increasing order; empty for n == 1.
std::vector<std::uint64_t> prime_factors(std::uint64_t n);

std::uint64_t gcd(std::uint64_t a, std::uint64_t b);

/// Least k >= 1 with a^k = 1 (mod n). Requires n >= 2 and gcd(a, n) == 1,
/// otherwise throws UndefinedOrderError.
std::uint64_t multiplicative_order(std::uint64_t a, std::uint64_t n);

/// gcd(g, n) == 1 and ord_n(g) == phi(n). Never throws for n >= 2.
bool is_primitive_root(std::uint64_t g, std::uint64_t n);

enum class Parity { even, odd };

struct PropertyLabels {
  std::uint64_t value = 0;
  std::uint64_t lowest_prime_factor = 0;
  Parity parity = Parity::even;
  bool is_prime = false;
  std::uint64_t divisor_count = 0;
  // Order of value modulo the configured probe modulus; absent when not coprime.
  std::optional<std::uint64_t> multiplicative_order;
  std::uint64_t totient = 0;
  std::optional<bool> is_primitive_root;
  std::uint64_t residue_mod_5 = 0;
  std::vector<std::uint64_t> multiple_of;
};

/// One row per value. order_modulus == 0 leaves the order/primitive-root
/// columns empty; otherwise it must be >= 2.
std::vector<PropertyLabels> build_label_table(std::span<const std::uint64_t> values,
                                              std::uint64_t order_modulus,
                                              std::span<const std::uint64_t> multiple_primes);

/// Column names, identical to the PropertyLabels field names.
const std::vector<std::string>& label_columns();

/// Cells for one row in label_columns() order. Optional fields render as
/// an empty cell, multiple_of as a ';'-joined list.
std::vector<std::string> label_cells(const PropertyLabels& labels);

void write_label_csv(std::ostream& out, std::span<const PropertyLabels> rows);

}  // namespace mexp::numtheory
