#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdlab {

using Vector = std::vector<double>;
using Rng = std::mt19937_64;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Precondition violated by a caller-supplied value (ranges, names, shapes).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class OutOfRange : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

class DimensionMismatch : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

/// Raised when an optimisation loop produces a non-finite loss or gradient.
class NumericalAbort : public Error {
 public:
  using Error::Error;
};

void require_dim(std::size_t actual, std::size_t expected, const char* what);

double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> a);
double norm(std::span<const double> a);
double cosine_similarity(std::span<const double> a, std::span<const double> b);
bool all_finite(std::span<const double> a);

/// out += scale * v
void axpy(double scale, std::span<const double> v, std::span<double> out);

Vector standard_normal(Rng& rng, std::size_t n);
void fill_standard_normal(Rng& rng, std::span<double> out);

/// Runs fn(i) for i in [0, n). Work is split into contiguous chunks over at
/// most `threads` workers; with threads <= 1 everything runs on the caller.
void parallel_for(std::size_t n, unsigned threads,
                  const std::function<void(std::size_t)>& fn);

/// Hardware concurrency, never zero.
unsigned default_thread_count();

}  // namespace sdlab
