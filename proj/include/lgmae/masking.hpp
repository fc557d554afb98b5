#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#include "lgmae/core.hpp"
#include "lgmae/rng.hpp"
#include "lgmae/tokenizer.hpp"

namespace lgmae {

struct NonTilingRegion : std::runtime_error {
  explicit NonTilingRegion(const std::string& w) : std::runtime_error(w) {}
};
struct NonIntegralVisibleCount : std::runtime_error {
  explicit NonIntegralVisibleCount(const std::string& w) : std::runtime_error(w) {}
};

struct RegionShape {
  int t = 0, h = 0, w = 0;
  int tokens() const { return t * h * w; }
  bool operator==(const RegionShape&) const = default;
};

// Exact tiling of the token grid into t x h x w regions. Region indices are
// row-major over (grid.t/t, grid.h/h, grid.w/w); the same order fixes the
// canonical region-major token layout used by the encoder.
struct RegionPartition {
  GridShape grid;
  RegionShape region;
  int rt = 0, rh = 0, rw = 0;  // region counts per axis

  int num_regions() const { return rt * rh * rw; }       // M
  int tokens_per_region() const { return region.tokens(); }  // N

  int flat_index(int t, int h, int w) const { return (t * grid.h + h) * grid.w + w; }

  int region_of(int t, int h, int w) const {
    return ((t / region.t) * rh + h / region.h) * rw + w / region.w;
  }

  // Flat grid indices of one region, row-major over local (t, h, w).
  std::vector<int> region_token_indices(int r) const {
    const int it = r / (rh * rw);
    const int ih = (r / rw) % rh;
    const int iw = r % rw;
    std::vector<int> out;
    out.reserve(tokens_per_region());
    for (int t = 0; t < region.t; ++t)
      for (int h = 0; h < region.h; ++h)
        for (int w = 0; w < region.w; ++w)
          out.push_back(flat_index(it * region.t + t, ih * region.h + h, iw * region.w + w));
    return out;
  }
};

inline RegionPartition make_partition(GridShape grid, RegionShape region) {
  if (region.t <= 0 || region.h <= 0 || region.w <= 0 || grid.t % region.t != 0 ||
      grid.h % region.h != 0 || grid.w % region.w != 0)
    throw NonTilingRegion("make_partition: region " + std::to_string(region.t) + "x" +
                          std::to_string(region.h) + "x" + std::to_string(region.w) +
                          " does not tile grid " + std::to_string(grid.t) + "x" +
                          std::to_string(grid.h) + "x" + std::to_string(grid.w));
  RegionPartition p;
  p.grid = grid;
  p.region = region;
  p.rt = grid.t / region.t;
  p.rh = grid.h / region.h;
  p.rw = grid.w / region.w;
  return p;
}

// Tube mask: a spatial visibility pattern replicated across every time slot.
// Stratified so each region of the active partition holds exactly
// (1-rho)*N visible tokens.
struct TubeMask {
  GridShape grid;
  double rho = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::uint8_t> visible;  // [K], flat grid order

  int visible_count() const {
    int n = 0;
    for (auto v : visible) n += v;
    return n;
  }
};

// Samples (1-rho)*h*w spatial positions per region footprint, without
// replacement, and marks them visible at every time index. Footprints get
// independent split streams of the seed, so generation order is irrelevant.
inline TubeMask sample_tube_mask(const RegionPartition& p, double rho, std::uint64_t seed) {
  if (!(rho > 0.0 && rho < 1.0))
    throw NonIntegralVisibleCount("sample_tube_mask: rho must be in (0,1)");
  const int n_region = p.tokens_per_region();
  const double vis_exact = (1.0 - rho) * n_region;
  const int vis_per_region = static_cast<int>(std::llround(vis_exact));
  if (std::abs(vis_exact - vis_per_region) > 1e-9 * n_region || vis_per_region <= 0)
    throw NonIntegralVisibleCount("sample_tube_mask: (1-rho)*N = " + std::to_string(vis_exact) +
                                  " is not a positive integer");
  if (vis_per_region % p.region.t != 0)
    throw NonIntegralVisibleCount(
        "sample_tube_mask: per-region visible count " + std::to_string(vis_per_region) +
        " not divisible by region time extent " + std::to_string(p.region.t));
  const int vis_spatial = vis_per_region / p.region.t;  // per footprint

  TubeMask mask;
  mask.grid = p.grid;
  mask.rho = rho;
  mask.seed = seed;
  mask.visible.assign(p.grid.tokens(), 0);

  const int footprint = p.region.h * p.region.w;
  for (int fh = 0; fh < p.rh; ++fh)
    for (int fw = 0; fw < p.rw; ++fw) {
      Rng rng = Rng::split(seed, static_cast<std::uint64_t>(fh) * p.rw + fw);
      const std::vector<int> picks = rng.sample_without_replacement(footprint, vis_spatial);
      for (int pick : picks) {
        const int h = fh * p.region.h + pick / p.region.w;
        const int w = fw * p.region.w + pick % p.region.w;
        for (int t = 0; t < p.grid.t; ++t) mask.visible[p.flat_index(t, h, w)] = 1;
      }
    }
  return mask;
}

// Canonical visible ordering: region-major (partition order), row-major
// inside each region. With a null mask this enumerates all tokens, which is
// the layout the encoder uses during fine-tuning.
inline std::vector<int> visible_indices(const RegionPartition& p, const TubeMask* mask) {
  if (mask != nullptr)
    require_shape(mask->grid == p.grid, "visible_indices: mask grid mismatch");
  std::vector<int> out;
  for (int r = 0; r < p.num_regions(); ++r)
    for (int idx : p.region_token_indices(r))
      if (mask == nullptr || mask->visible[idx]) out.push_back(idx);
  return out;
}

template <typename T>
struct GatheredTokens {
  Matrix<T> tokens;          // [L, C]
  std::vector<int> indices;  // flat grid index per row
};

template <typename T>
GatheredTokens<T> gather_visible(const TokenGrid<T>& grid, const TubeMask& mask,
                                 const RegionPartition& p) {
  require_shape(grid.grid == mask.grid && grid.grid == p.grid,
                "gather_visible: grid/mask/partition shapes differ");
  GatheredTokens<T> out;
  out.indices = visible_indices(p, &mask);
  out.tokens = Matrix<T>(static_cast<int>(out.indices.size()), grid.tokens.cols);
  for (size_t i = 0; i < out.indices.size(); ++i)
    std::copy(grid.tokens.row(out.indices[i]), grid.tokens.row(out.indices[i]) + grid.tokens.cols,
              out.tokens.row(static_cast<int>(i)));
  return out;
}

// Rebuilds the full [K, C_d] sequence: visible embeddings return to their
// grid slots, the single learnable mask token fills the rho*K masked slots,
// and the decoder positional table is added everywhere.
template <typename T>
Matrix<T> scatter_with_mask_tokens(const Matrix<T>& visible, const TubeMask& mask,
                                   const RegionPartition& p, const std::vector<T>& mask_token,
                                   const Matrix<T>& pos) {
  const std::vector<int> idx = visible_indices(p, &mask);
  require_shape(static_cast<size_t>(visible.rows) == idx.size(),
                "scatter_with_mask_tokens: visible row count != mask count");
  require_shape(static_cast<size_t>(visible.cols) == mask_token.size(),
                "scatter_with_mask_tokens: channel mismatch with mask token");
  const int k_total = mask.grid.tokens();
  require_shape(pos.rows == k_total && pos.cols == visible.cols,
                "scatter_with_mask_tokens: positional table shape");
  Matrix<T> out(k_total, visible.cols);
  for (int i = 0; i < k_total; ++i)
    std::copy(mask_token.begin(), mask_token.end(), out.row(i));
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy(visible.row(static_cast<int>(i)), visible.row(static_cast<int>(i)) + visible.cols,
              out.row(idx[i]));
  add_inplace(out, pos);
  return out;
}

// Bit-packed wire format for test-vector exchange: header (grid dims, rho,
// seed), then ceil(K/8) bytes LSB-first in flat grid order.
inline std::vector<std::uint8_t> serialize_mask(const TubeMask& mask) {
  std::vector<std::uint8_t> out;
  auto push_u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  auto push_u64 = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  out.push_back('T');
  out.push_back('M');
  out.push_back('S');
  out.push_back('K');
  push_u32(1);  // version
  push_u32(static_cast<std::uint32_t>(mask.grid.t));
  push_u32(static_cast<std::uint32_t>(mask.grid.h));
  push_u32(static_cast<std::uint32_t>(mask.grid.w));
  std::uint64_t rho_bits;
  std::memcpy(&rho_bits, &mask.rho, 8);
  push_u64(rho_bits);
  push_u64(mask.seed);
  const int k_total = mask.grid.tokens();
  std::vector<std::uint8_t> bits((k_total + 7) / 8, 0);
  for (int i = 0; i < k_total; ++i)
    if (mask.visible[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  out.insert(out.end(), bits.begin(), bits.end());
  return out;
}

inline TubeMask deserialize_mask(const std::vector<std::uint8_t>& bytes) {
  auto fail = [](const std::string& w) -> TubeMask { throw ShapeError("deserialize_mask: " + w); };
  if (bytes.size() < 36 || bytes[0] != 'T' || bytes[1] != 'M' || bytes[2] != 'S' || bytes[3] != 'K')
    return fail("bad magic");
  size_t o = 4;
  auto read_u32 = [&]() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[o++]) << (8 * i);
    return v;
  };
  auto read_u64 = [&]() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[o++]) << (8 * i);
    return v;
  };
  if (read_u32() != 1) return fail("unsupported version");
  TubeMask mask;
  mask.grid.t = static_cast<int>(read_u32());
  mask.grid.h = static_cast<int>(read_u32());
  mask.grid.w = static_cast<int>(read_u32());
  const std::uint64_t rho_bits = read_u64();
  std::memcpy(&mask.rho, &rho_bits, 8);
  mask.seed = read_u64();
  const int k_total = mask.grid.tokens();
  const size_t nbytes = (k_total + 7) / 8;
  if (bytes.size() != o + nbytes) return fail("truncated payload");
  mask.visible.assign(k_total, 0);
  for (int i = 0; i < k_total; ++i)
    mask.visible[i] = (bytes[o + i / 8] >> (i % 8)) & 1u;
  return mask;
}

}  // namespace lgmae
