#pragma once

// Shared plumbing: error type, deterministic RNG, quantiles, hashing,
// timestamp handling and number formatting used across the toolkit.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace memopt {

class Error : public std::runtime_error {
public:
  enum class Kind {
    MissingColumn,
    ParseError,
    EmptyDataset,
    DegenerateSplit,
    EmptyInput,
    NotFitted,
    InvalidParams,
    SchemaMismatch,
    SingleClass,
    LengthMismatch,
    AllZeroActuals,
    NonPositiveReq,
    CardinalityMismatch,
    ArtifactInvalid,
    ConfigError,
    IoError,
  };

  Error(Kind kind, std::string message)
      : std::runtime_error(std::move(message)), kind_(kind) {}

  Kind kind() const { return kind_; }

private:
  Kind kind_;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. std::mt19937_64 is standardized, the distribution
// adapters are not, so draws are implemented here to keep outputs stable
// across standard libraries.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : state_(splitmix64(seed ^ 0xa0761d6478bd642fULL)) {}

  std::uint64_t next_u64() {
    // xorshift* keeps the generator header-only and platform independent.
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545f4914f6cdd1dULL;
  }

  // Uniform integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  // Uniform real in [lo, hi).
  double uniform_real(double lo = 0.0, double hi = 1.0) {
    const double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return lo + u * (hi - lo);
  }

  double log_uniform_real(double lo, double hi) {
    return std::exp(uniform_real(std::log(lo), std::log(hi)));
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // Box-Muller, one value per call.
    double u1 = uniform_real(1e-12, 1.0);
    double u2 = uniform_real();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), ascending.
  std::vector<std::uint32_t> sample_indices(std::size_t n, std::size_t k) {
    std::vector<std::uint32_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<std::uint32_t>(i);
    if (k >= n) return all;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = static_cast<std::size_t>(
          uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n) - 1));
      std::swap(all[i], all[j]);
    }
    all.resize(k);
    std::sort(all.begin(), all.end());
    return all;
  }

private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Quantiles.

// Linear-interpolation quantile over unsorted data (the common "linear"
// definition: position h = (n-1)*q on the sorted sample).
inline double quantile_linear(std::vector<double> v, double q) {
  if (v.empty()) throw Error(Error::Kind::EmptyInput, "quantile_linear: empty input");
  std::sort(v.begin(), v.end());
  if (v.size() == 1) return v[0];
  q = std::clamp(q, 0.0, 1.0);
  const double h = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 >= v.size()) return v.back();
  const double frac = h - static_cast<double>(lo);
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

// Upper order-statistic quantile: smallest x with F(x) >= q. This is an exact
// minimizer of the pinball loss over constants, which the boosting leaf
// updates rely on.
inline double quantile_upper(std::vector<double> v, double q) {
  if (v.empty()) throw Error(Error::Kind::EmptyInput, "quantile_upper: empty input");
  std::sort(v.begin(), v.end());
  q = std::clamp(q, 0.0, 1.0);
  const double pos = q * static_cast<double>(v.size());
  std::size_t k = static_cast<std::size_t>(std::ceil(pos));
  if (k < 1) k = 1;
  if (k > v.size()) k = v.size();
  return v[k - 1];
}

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double stddev_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

// ---------------------------------------------------------------------------
// Hashing (FNV-1a, 64 bit) for artifact fingerprints.

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// Number formatting/parsing. Doubles use the shortest representation that
// round-trips, so serialized artifacts are stable across platforms.

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  double out = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto res = std::from_chars(first, last, out);
  if (res.ec != std::errc() || res.ptr != last || !std::isfinite(out)) return std::nullopt;
  return out;
}

inline std::optional<std::int64_t> parse_int(std::string_view s) {
  auto d = parse_double(s);
  if (!d) return std::nullopt;
  if (*d > 9.2e18 || *d < -9.2e18) return std::nullopt;
  const double r = std::nearbyint(*d);
  if (std::abs(*d - r) > 1e-9 * std::max(1.0, std::abs(*d))) return std::nullopt;
  return static_cast<std::int64_t>(r);
}

// ---------------------------------------------------------------------------
// Small string helpers.

inline std::vector<std::string> split_string(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// ---------------------------------------------------------------------------
// Calendar. All timestamps are UTC epoch seconds internally.

struct CivilTime {
  int year = 1970;
  int month = 1;  // 1..12
  int day = 1;    // 1..31
  int hour = 0;
  int minute = 0;
  int second = 0;
};

// Days since 1970-01-01 for a proleptic Gregorian date.
inline std::int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2) / 5 + static_cast<unsigned>(d) - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline CivilTime civil_from_epoch(std::int64_t epoch_s) {
  std::int64_t days = epoch_s / 86400;
  std::int64_t rem = epoch_s % 86400;
  if (rem < 0) {
    rem += 86400;
    days -= 1;
  }
  std::int64_t z = days + 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp + (mp < 10 ? 3 : static_cast<unsigned>(-9));
  CivilTime c;
  c.year = static_cast<int>(y + (m <= 2));
  c.month = static_cast<int>(m);
  c.day = static_cast<int>(d);
  c.hour = static_cast<int>(rem / 3600);
  c.minute = static_cast<int>((rem % 3600) / 60);
  c.second = static_cast<int>(rem % 60);
  return c;
}

// Day of week with Monday = 0. 1970-01-01 was a Thursday.
inline int weekday_monday0(std::int64_t epoch_s) {
  std::int64_t days = epoch_s / 86400;
  if (epoch_s % 86400 < 0) days -= 1;
  return static_cast<int>(((days % 7) + 7 + 3) % 7);
}

inline bool is_leap_year(int y) {
  return (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
}

// ISO-8601 week of year, 1..53.
inline int iso_week_of_year(std::int64_t epoch_s) {
  const CivilTime c = civil_from_epoch(epoch_s);
  const int dow = weekday_monday0(epoch_s) + 1;  // Monday = 1
  const std::int64_t jan1 = days_from_civil(c.year, 1, 1);
  const int doy = static_cast<int>(days_from_civil(c.year, c.month, c.day) - jan1) + 1;
  int week = (doy - dow + 10) / 7;
  auto weeks_in = [](int y) {
    const int jan1_dow = static_cast<int>(((days_from_civil(y, 1, 1) % 7) + 7 + 3) % 7) + 1;
    return 52 + ((jan1_dow == 4 || (is_leap_year(y) && jan1_dow == 3)) ? 1 : 0);
  };
  if (week < 1) return weeks_in(c.year - 1);
  if (week > weeks_in(c.year)) return 1;
  return week;
}

// Accepts epoch seconds (integer or real) or ISO-8601
// (YYYY-MM-DD[T ]hh:mm:ss[.fff][Z|+hh:mm|-hh:mm], date-only allowed).
inline std::optional<std::int64_t> parse_timestamp(std::string_view raw) {
  const std::string s = trim(raw);
  if (s.empty()) return std::nullopt;
  const bool has_dash_inside = s.size() > 4 && s.find('-', 1) != std::string::npos;
  if (!has_dash_inside) {
    if (auto num = parse_double(s)) return static_cast<std::int64_t>(std::floor(*num));
    return std::nullopt;
  }
  int y = 0, mo = 0, d = 0, h = 0, mi = 0;
  double sec = 0.0;
  int off_sign = 0, off_h = 0, off_m = 0;
  const char* p = s.c_str();
  auto read_int = [&](int digits, int& out) -> bool {
    out = 0;
    for (int i = 0; i < digits; ++i) {
      if (*p < '0' || *p > '9') return false;
      out = out * 10 + (*p - '0');
      ++p;
    }
    return true;
  };
  if (!read_int(4, y) || *p++ != '-' || !read_int(2, mo) || *p++ != '-' || !read_int(2, d)) return std::nullopt;
  if (*p == 'T' || *p == ' ') {
    ++p;
    if (!read_int(2, h) || *p++ != ':' || !read_int(2, mi)) return std::nullopt;
    if (*p == ':') {
      ++p;
      int si = 0;
      if (!read_int(2, si)) return std::nullopt;
      sec = si;
      if (*p == '.') {
        ++p;
        double scale = 0.1;
        while (*p >= '0' && *p <= '9') {
          sec += (*p - '0') * scale;
          scale *= 0.1;
          ++p;
        }
      }
    }
    if (*p == 'Z') {
      ++p;
    } else if (*p == '+' || *p == '-') {
      off_sign = (*p == '+') ? 1 : -1;
      ++p;
      if (!read_int(2, off_h)) return std::nullopt;
      if (*p == ':') ++p;
      if (*p >= '0' && *p <= '9') {
        if (!read_int(2, off_m)) return std::nullopt;
      }
    }
  }
  if (*p != '\0') return std::nullopt;
  if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || sec >= 61.0) return std::nullopt;
  std::int64_t epoch = days_from_civil(y, mo, d) * 86400 + h * 3600 + mi * 60 +
                       static_cast<std::int64_t>(std::floor(sec));
  epoch -= off_sign * (off_h * 3600 + off_m * 60);
  return epoch;
}

inline std::string format_iso_utc(std::int64_t epoch_s) {
  const CivilTime c = civil_from_epoch(epoch_s);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02dZ", c.year, c.month, c.day, c.hour,
                c.minute, c.second);
  return std::string(buf);
}

}  // namespace memopt
