#pragma once

#include <cmath>

// Absolute-tolerance check; doctest's Approx is relative-only.
#define CHECK_ABS(a, b, tol) CHECK(std::abs(static_cast<double>(a) - static_cast<double>(b)) <= (tol))
#define REQUIRE_ABS(a, b, tol) \
  REQUIRE(std::abs(static_cast<double>(a) - static_cast<double>(b)) <= (tol))
