#include "m3/lrd.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include "m3/error.hpp"
#include "m3/text.hpp"

namespace m3 {
namespace {

// Partial sums are formed per fixed-size chunk and combined in chunk order,
// so the thread count never changes the rounding.
constexpr std::size_t kChunk = 4096;

template <class F>
std::vector<double> chunked(std::size_t n, std::size_t width, std::size_t threads, F&& body) {
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<double> partial(chunks * width, 0.0);
  auto run = [&](std::size_t first, std::size_t stride) {
    for (std::size_t c = first; c < chunks; c += stride) {
      body(c * kChunk, std::min(n, (c + 1) * kChunk), std::span(partial).subspan(c * width, width));
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, chunks));
  if (threads == 1) {
    run(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(run, t, threads);
  }
  std::vector<double> total(width, 0.0);
  for (std::size_t c = 0; c < chunks; ++c) {
    for (std::size_t k = 0; k < width; ++k) total[k] += partial[c * width + k];
  }
  return total;
}

void check_item(const Tensor& q, std::size_t item) {
  if (item >= q.rows()) {
    fail(ErrorCode::vocabulary_mismatch, "item " + std::to_string(item) +
                                             " has no embedding (table has " +
                                             std::to_string(q.rows()) + " rows)");
  }
}

}  // namespace

std::size_t dep_samples(std::span<const UserSequence> sequences, std::size_t lag) noexcept {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.events.size() > lag;
  return n;
}

double dep_l(std::span<const UserSequence> sequences, const Tensor& q, std::size_t lag,
             std::size_t threads) {
  if (q.rank() != 2) fail(ErrorCode::shape_mismatch, "dep_l: embeddings must be a matrix");
  std::vector<std::size_t> a, b;
  for (const auto& s : sequences) {
    if (s.events.size() <= lag) continue;
    a.push_back(s.events.back().item);
    b.push_back(s.events[s.events.size() - 1 - lag].item);
    check_item(q, a.back());
    check_item(q, b.back());
  }
  const std::size_t n = a.size();
  if (n < 2) {
    fail(ErrorCode::invalid_argument, "dep_l: lag " + std::to_string(lag) +
                                          " needs at least 2 sequences longer than the lag, found " +
                                          std::to_string(n));
  }
  const std::size_t d = q.cols();
  const auto sums = chunked(n, 2 * d, threads, [&](std::size_t lo, std::size_t hi, std::span<double> out) {
    for (std::size_t s = lo; s < hi; ++s) {
      const auto ra = q.row(a[s]);
      const auto rb = q.row(b[s]);
      for (std::size_t k = 0; k < d; ++k) {
        out[k] += ra[k];
        out[d + k] += rb[k];
      }
    }
  });
  std::vector<double> mean_a(d), mean_b(d);
  for (std::size_t k = 0; k < d; ++k) {
    mean_a[k] = sums[k] / static_cast<double>(n);
    mean_b[k] = sums[d + k] / static_cast<double>(n);
  }
  const auto cross = chunked(n, 1, threads, [&](std::size_t lo, std::size_t hi, std::span<double> out) {
    for (std::size_t s = lo; s < hi; ++s) {
      const auto ra = q.row(a[s]);
      const auto rb = q.row(b[s]);
      for (std::size_t k = 0; k < d; ++k) out[0] += (ra[k] - mean_a[k]) * (rb[k] - mean_b[k]);
    }
  });
  return cross[0] / static_cast<double>(n);
}

std::optional<double> loglog_slope(std::span<const std::size_t> lags,
                                   std::span<const std::optional<double>> dep) {
  std::vector<double> x, y;
  for (std::size_t i = 0; i < lags.size(); ++i) {
    if (dep[i] && *dep[i] > 0) {
      x.push_back(std::log(static_cast<double>(lags[i])));
      y.push_back(std::log(*dep[i]));
    }
  }
  if (x.size() < 2) return std::nullopt;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

DepProfile dep_profile(std::span<const UserSequence> sequences, const Tensor& q,
                       std::span<const std::size_t> lags, std::size_t threads) {
  DepProfile p;
  for (std::size_t i = 0; i < lags.size(); ++i) {
    if (lags[i] == 0) fail(ErrorCode::invalid_argument, "dep_profile: lags must be positive");
    if (i > 0 && lags[i] <= lags[i - 1]) {
      fail(ErrorCode::invalid_argument, "dep_profile: lags must be strictly ascending");
    }
    const std::size_t n = dep_samples(sequences, lags[i]);
    p.lags.push_back(lags[i]);
    p.n_samples.push_back(n);
    p.dep.push_back(n >= 2 ? std::optional(dep_l(sequences, q, lags[i], threads)) : std::nullopt);
  }
  p.slope = loglog_slope(p.lags, p.dep);
  return p;
}

void write_profile_csv(std::ostream& out, const DepProfile& p) {
  out << "lag,dep,n_samples\n";
  for (std::size_t i = 0; i < p.lags.size(); ++i) {
    out << p.lags[i] << ',' << (p.dep[i] ? text::format_double(*p.dep[i]) : "") << ','
        << p.n_samples[i] << '\n';
  }
}

void write_profile_csv(const std::string& path, const DepProfile& p) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::io, "cannot open " + path + " for writing");
  write_profile_csv(out, p);
}

Tensor read_embeddings(std::istream& in) {
  std::vector<std::vector<double>> rows;
  std::vector<bool> seen;
  std::size_t dim = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto where = "embeddings line " + std::to_string(line_no) + ": ";
    std::istringstream fields(line);
    std::string token;
    if (!(fields >> token)) continue;
    const auto index = text::parse_int<std::size_t>(token);
    if (!index) fail(ErrorCode::format, where + "bad item index '" + token + "'");
    std::vector<double> values;
    while (fields >> token) {
      const auto v = text::parse_double(token);
      if (!v || !std::isfinite(*v)) fail(ErrorCode::format, where + "bad value '" + token + "'");
      values.push_back(*v);
    }
    if (values.empty()) fail(ErrorCode::format, where + "no values");
    if (dim == 0) dim = values.size();
    if (values.size() != dim) {
      fail(ErrorCode::format, where + "expected " + std::to_string(dim) + " values, got " +
                                  std::to_string(values.size()));
    }
    if (*index >= rows.size()) {
      rows.resize(*index + 1);
      seen.resize(*index + 1, false);
    }
    if (seen[*index]) fail(ErrorCode::format, where + "duplicate item " + token);
    seen[*index] = true;
    rows[*index] = std::move(values);
  }
  if (rows.empty()) fail(ErrorCode::format, "embeddings: no rows");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!seen[i]) fail(ErrorCode::format, "embeddings: item " + std::to_string(i) + " missing");
  }
  Tensor q({rows.size(), dim});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].begin(), rows[i].end(), q.row(i).begin());
  }
  return q;
}

Tensor read_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open " + path);
  return read_embeddings(in);
}

void write_embeddings(std::ostream& out, const Tensor& q) {
  for (std::size_t i = 0; i < q.rows(); ++i) {
    out << i;
    for (double v : q.row(i)) out << ' ' << text::format_double(v);
    out << '\n';
  }
}

void write_embeddings(const std::string& path, const Tensor& q) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::io, "cannot open " + path + " for writing");
  write_embeddings(out, q);
}

}  // namespace m3
