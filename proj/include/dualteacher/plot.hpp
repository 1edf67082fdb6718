#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "dualteacher/errors.hpp"
#include "dualteacher/png_io.hpp"
#include "dualteacher/trainer.hpp"

namespace dualteacher {
namespace plotdetail {

struct Rgb {
  std::uint8_t r, g, b;
};

constexpr Rgb kBlack{0, 0, 0};
constexpr Rgb kGray{200, 200, 200};
constexpr Rgb kLoss{200, 40, 40};
constexpr Rgb kDice{40, 70, 200};

struct Canvas {
  int w, h;
  std::vector<std::uint8_t> px;

  Canvas(int w_, int h_) : w(w_), h(h_), px(static_cast<std::size_t>(w_) * h_ * 3, 255) {}

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    std::uint8_t* p = px.data() + (static_cast<std::size_t>(y) * w + x) * 3;
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
  }

  void line(int x0, int y0, int x1, int y1, Rgb c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void dot(int x, int y, Rgb c) {
    for (int oy = -1; oy <= 1; ++oy)
      for (int ox = -1; ox <= 1; ++ox) set(x + ox, y + oy, c);
  }
};

// 5x7 bitmap glyphs, one byte per row, low 5 bits used. Digits plus the few
// letters the panel titles need.
inline const std::array<std::uint8_t, 7>* glyph(char ch) {
  using G = std::array<std::uint8_t, 7>;
  static const G d0{0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E};
  static const G d1{0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E};
  static const G d2{0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F};
  static const G d3{0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E};
  static const G d4{0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02};
  static const G d5{0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E};
  static const G d6{0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E};
  static const G d7{0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08};
  static const G d8{0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E};
  static const G d9{0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C};
  static const G dot{0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C};
  static const G dash{0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00};
  static const G A{0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11};
  static const G C{0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E};
  static const G D{0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E};
  static const G E{0x1F, 0x10, 0x1E, 0x10, 0x10, 0x10, 0x1F};
  static const G H{0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11};
  static const G I{0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E};
  static const G L{0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F};
  static const G O{0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E};
  static const G P{0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10};
  static const G S{0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E};
  static const G V{0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04};
  switch (ch) {
    case '0': return &d0;
    case '1': return &d1;
    case '2': return &d2;
    case '3': return &d3;
    case '4': return &d4;
    case '5': return &d5;
    case '6': return &d6;
    case '7': return &d7;
    case '8': return &d8;
    case '9': return &d9;
    case '.': return &dot;
    case '-': return &dash;
    case 'A': return &A;
    case 'C': return &C;
    case 'D': return &D;
    case 'E': return &E;
    case 'H': return &H;
    case 'I': return &I;
    case 'L': return &L;
    case 'O': return &O;
    case 'P': return &P;
    case 'S': return &S;
    case 'V': return &V;
    default: return nullptr;  // unknown chars render as a space
  }
}

inline void text(Canvas& cv, int x, int y, const std::string& s, Rgb c) {
  for (char ch : s) {
    if (const auto* g = glyph(ch)) {
      for (int row = 0; row < 7; ++row)
        for (int col = 0; col < 5; ++col)
          if ((*g)[row] & (1 << (4 - col))) cv.set(x + col, y + row, c);
    }
    x += 6;
  }
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct Panel {
  int x0, y0, x1, y1;  // plot box, y grows downward
  double lo, hi;       // value range mapped onto [y1, y0]

  int px(double frac, int n) const {
    if (n <= 1) return (x0 + x1) / 2;
    return x0 + static_cast<int>(std::lround(frac * (x1 - x0)));
  }
  int py(double v) const {
    const double f = (v - lo) / (hi - lo);
    return y1 - static_cast<int>(std::lround(f * (y1 - y0)));
  }
};

inline void draw_panel(Canvas& cv, Panel& p, const std::string& title,
                       const std::vector<double>& ys, int epochs, Rgb color) {
  double lo = *std::min_element(ys.begin(), ys.end());
  double hi = *std::max_element(ys.begin(), ys.end());
  if (hi - lo < 1e-9) {
    hi += 0.5;
    lo -= 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  p.lo = lo - pad;
  p.hi = hi + pad;

  for (int i = 0; i <= 4; ++i) {
    const double v = p.lo + (p.hi - p.lo) * i / 4.0;
    const int y = p.py(v);
    cv.line(p.x0, y, p.x1, y, kGray);
    text(cv, p.x0 - 44, y - 3, fmt(v), kBlack);
  }
  const int xticks = std::min(epochs, 5);
  for (int i = 0; i < xticks; ++i) {
    const int e = xticks == 1 ? epochs : 1 + i * (epochs - 1) / (xticks - 1);
    const int x = p.px(epochs == 1 ? 0.5 : (e - 1) / static_cast<double>(epochs - 1), epochs);
    cv.line(x, p.y0, x, p.y1, kGray);
    text(cv, x - 6, p.y1 + 5, std::to_string(e), kBlack);
  }
  cv.line(p.x0, p.y0, p.x0, p.y1, kBlack);
  cv.line(p.x0, p.y1, p.x1, p.y1, kBlack);
  text(cv, p.x0, p.y0 - 12, title, kBlack);

  int prev_x = 0, prev_y = 0;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const int x = p.px(ys.size() == 1 ? 0.5 : i / static_cast<double>(ys.size() - 1),
                       static_cast<int>(ys.size()));
    const int y = p.py(ys[i]);
    cv.dot(x, y, color);
    if (i > 0) cv.line(prev_x, prev_y, x, y, color);
    prev_x = x;
    prev_y = y;
  }
}

}  // namespace plotdetail

// Two stacked panels: training loss on top, validation dice below, both
// against the epoch axis.
inline void write_curves_png(const std::string& path, const std::vector<EpochRecord>& log) {
  if (log.empty()) throw InputError("write_curves_png: empty metrics log");
  plotdetail::Canvas cv(720, 500);
  std::vector<double> loss, dice;
  for (const auto& r : log) {
    loss.push_back(r.loss_total);
    dice.push_back(r.val.mean_dice);
  }
  const int epochs = static_cast<int>(log.size());
  plotdetail::Panel top{56, 28, 700, 218, 0, 1};
  plotdetail::Panel bot{56, 270, 700, 460, 0, 1};
  plotdetail::draw_panel(cv, top, "LOSS", loss, epochs, plotdetail::kLoss);
  plotdetail::draw_panel(cv, bot, "VAL DICE", dice, epochs, plotdetail::kDice);
  plotdetail::text(cv, 345, 486, "EPOCH", plotdetail::kBlack);
  write_png_rgb8(path, cv.w, cv.h, cv.px);
}

}  // namespace dualteacher
