#include "mexp/numtheory.hpp"

#include <ostream>

#include "mexp/csv.hpp"

namespace mexp::numtheory {

namespace {

std::uint64_t mulmod(std::uint64_t x, std::uint64_t y, std::uint64_t m) {
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(x) * y) % m);
}

void require_positive(std::uint64_t n, const char* op) {
  if (n == 0) {
    throw DomainError(std::string(op) + ": argument must be >= 1");
  }
}

}  // namespace

std::uint64_t modpow(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  if (c == 0) {
    throw DomainError("modpow: modulus must be >= 1");
  }
  std::uint64_t result = 1 % c;
  std::uint64_t base = a % c;
  while (b > 0) {
    if (b & 1U) {
      result = mulmod(result, base, c);
    }
    base = mulmod(base, base, c);
    b >>= 1U;
  }
  return result;
}

std::uint64_t gcd(std::uint64_t a, std::uint64_t b) {
  while (b != 0) {
    const std::uint64_t t = a % b;
    a = b;
    b = t;
  }
  return a;
}

std::uint64_t lowest_prime_factor(std::uint64_t n) {
  require_positive(n, "lowest_prime_factor");
  if (n == 1) {
    return 1;
  }
  if (n % 2 == 0) {
    return 2;
  }
  for (std::uint64_t p = 3; p <= n / p; p += 2) {
    if (n % p == 0) {
      return p;
    }
  }
  return n;
}

bool is_prime(std::uint64_t n) {
  return n >= 2 && lowest_prime_factor(n) == n;
}

std::vector<std::uint64_t> prime_factors(std::uint64_t n) {
  require_positive(n, "prime_factors");
  std::vector<std::uint64_t> out;
  while (n > 1) {
    const std::uint64_t p = lowest_prime_factor(n);
    out.push_back(p);
    while (n % p == 0) {
      n /= p;
    }
  }
  return out;
}

std::uint64_t divisor_count(std::uint64_t n) {
  require_positive(n, "divisor_count");
  std::uint64_t count = 1;
  while (n > 1) {
    const std::uint64_t p = lowest_prime_factor(n);
    std::uint64_t exponent = 0;
    while (n % p == 0) {
      n /= p;
      ++exponent;
    }
    count *= exponent + 1;
  }
  return count;
}

std::uint64_t totient(std::uint64_t n) {
  require_positive(n, "totient");
  std::uint64_t result = n;
  for (const std::uint64_t p : prime_factors(n)) {
    result = result / p * (p - 1);
  }
  return result;
}

std::uint64_t multiplicative_order(std::uint64_t a, std::uint64_t n) {
  if (n < 2) {
    throw DomainError("multiplicative_order: modulus must be >= 2");
  }
  if (gcd(a % n, n) != 1) {
    throw UndefinedOrderError("multiplicative_order: gcd(" + std::to_string(a) + ", " +
                              std::to_string(n) + ") != 1");
  }
  // The order divides phi(n): test divisors of phi in increasing order.
  const std::uint64_t phi = totient(n);
  std::uint64_t best = phi;
  for (std::uint64_t k = 1; k <= phi / k; ++k) {
    if (phi % k != 0) {
      continue;
    }
    if (modpow(a, k, n) == 1) {
      return k;
    }
    const std::uint64_t co = phi / k;
    if (co < best && modpow(a, co, n) == 1) {
      best = co;
    }
  }
  return best;
}

bool is_primitive_root(std::uint64_t g, std::uint64_t n) {
  if (n < 2) {
    throw DomainError("is_primitive_root: modulus must be >= 2");
  }
  if (gcd(g % n, n) != 1) {
    return false;
  }
  return multiplicative_order(g, n) == totient(n);
}

std::vector<PropertyLabels> build_label_table(std::span<const std::uint64_t> values,
                                              std::uint64_t order_modulus,
                                              std::span<const std::uint64_t> multiple_primes) {
  if (values.empty()) {
    throw DomainError("build_label_table: no values");
  }
  if (order_modulus == 1) {
    throw DomainError("build_label_table: order modulus must be 0 (disabled) or >= 2");
  }
  std::vector<PropertyLabels> rows;
  rows.reserve(values.size());
  for (const std::uint64_t v : values) {
    require_positive(v, "build_label_table");
    PropertyLabels row;
    row.value = v;
    row.lowest_prime_factor = lowest_prime_factor(v);
    row.parity = v % 2 == 0 ? Parity::even : Parity::odd;
    row.is_prime = is_prime(v);
    row.divisor_count = divisor_count(v);
    row.totient = totient(v);
    row.residue_mod_5 = v % 5;
    if (order_modulus != 0) {
      if (gcd(v % order_modulus, order_modulus) == 1) {
        row.multiplicative_order = multiplicative_order(v, order_modulus);
      }
      row.is_primitive_root = is_primitive_root(v, order_modulus);
    }
    for (const std::uint64_t p : multiple_primes) {
      if (p != 0 && v % p == 0) {
        row.multiple_of.push_back(p);
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

const std::vector<std::string>& label_columns() {
  static const std::vector<std::string> columns = {
      "value",         "lowest_prime_factor", "parity",  "is_prime",
      "divisor_count", "multiplicative_order", "totient", "is_primitive_root",
      "residue_mod_5", "multiple_of"};
  return columns;
}

std::vector<std::string> label_cells(const PropertyLabels& labels) {
  std::string multiples;
  for (std::size_t i = 0; i < labels.multiple_of.size(); ++i) {
    if (i > 0) {
      multiples += ';';
    }
    multiples += std::to_string(labels.multiple_of[i]);
  }
  return {
      std::to_string(labels.value),
      std::to_string(labels.lowest_prime_factor),
      labels.parity == Parity::even ? "even" : "odd",
      labels.is_prime ? "true" : "false",
      std::to_string(labels.divisor_count),
      labels.multiplicative_order ? std::to_string(*labels.multiplicative_order) : "",
      std::to_string(labels.totient),
      labels.is_primitive_root ? (*labels.is_primitive_root ? "true" : "false") : "",
      std::to_string(labels.residue_mod_5),
      multiples,
  };
}

void write_label_csv(std::ostream& out, std::span<const PropertyLabels> rows) {
  csv::write_row(out, label_columns());
  for (const auto& row : rows) {
    csv::write_row(out, label_cells(row));
  }
}

}  // namespace mexp::numtheory
