#include "lrdb/net_spec.hpp"

#include <cctype>
#include <iostream>
#include <string>

#include "lrdb/errors.hpp"

namespace lrdb {
namespace {

class Cursor {
 public:
  explicit Cursor(std::string_view text) : text_(text) {}

  bool done() const { return pos_ == text_.size(); }
  std::size_t pos() const { return pos_; }

  void expect(char c) {
    if (done() || text_[pos_] != c) {
      throw ParseError(std::string("expected '") + c + "' in network spec \"" + std::string(text_) + "\"", pos_);
    }
    ++pos_;
  }

  int number() {
    const std::size_t start = pos_;
    long value = 0;
    while (!done() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
      value = value * 10 + (text_[pos_] - '0');
      if (value > 1'000'000) throw ParseError("number too large in network spec", start);
      ++pos_;
    }
    if (pos_ == start) {
      throw ParseError("expected a number in network spec \"" + std::string(text_) + "\"", pos_);
    }
    return static_cast<int>(value);
  }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string NetSpec::to_string() const {
  if (variant == Variant::plain) return "p" + std::to_string(layers);
  return "r" + std::to_string(layers) + "-" + std::to_string(depth) + "-" + std::to_string(width) + "-" +
         std::to_string(interlinks);
}

void validate(const NetSpec& spec) {
  if (spec.depth < 1) throw ValidationError("depth d must be >= 1, got " + std::to_string(spec.depth));
  if (spec.width < 1) throw ValidationError("width w must be >= 1, got " + std::to_string(spec.width));
  if (spec.num_classes < 2) throw ValidationError("need at least 2 classes");
  if (spec.interlinks < 1 || spec.interlinks > spec.depth + 1) {
    throw ValidationError("interlinks i must be in [1, d+1] = [1, " + std::to_string(spec.depth + 1) + "], got " +
                          std::to_string(spec.interlinks));
  }
  if (spec.layers < 8) throw ValidationError("L must be >= 8, got " + std::to_string(spec.layers));
  const int divisor = 3 * spec.depth;
  if ((spec.layers - 2) % divisor != 0) {
    throw ValidationError("L=" + std::to_string(spec.layers) + ", d=" + std::to_string(spec.depth) +
                          ": L-2=" + std::to_string(spec.layers - 2) + " is not divisible by 3*d=" +
                          std::to_string(divisor));
  }
}

NetSpec parse_spec(std::string_view text, const WarningSink& warn) {
  Cursor cur(text);
  NetSpec spec;
  if (cur.done()) throw ParseError("empty network spec", 0);
  const char head = text[0];
  if (head == 'p') {
    cur.expect('p');
    spec.variant = Variant::plain;
    spec.layers = cur.number();
    spec.depth = 2;
    spec.width = 1;
    spec.interlinks = 1;
  } else if (head == 'r') {
    cur.expect('r');
    spec.variant = Variant::residual;
    spec.layers = cur.number();
    cur.expect('-');
    spec.depth = cur.number();
    cur.expect('-');
    spec.width = cur.number();
    cur.expect('-');
    spec.interlinks = cur.number();
  } else {
    throw ParseError("network spec must start with 'r' or 'p', got \"" + std::string(text) + "\"", 0);
  }
  if (!cur.done()) throw ParseError("trailing characters in network spec \"" + std::string(text) + "\"", cur.pos());

  if (spec.residual() && spec.depth >= 1 && spec.interlinks > spec.depth + 1) {
    const std::string note = "interlinks " + std::to_string(spec.interlinks) + " clamped to d+1 = " +
                             std::to_string(spec.depth + 1) + " for " + std::string(text);
    if (warn) {
      warn(note);
    } else {
      std::cerr << "warning: " << note << '\n';
    }
    spec.interlinks = spec.depth + 1;
  }
  validate(spec);
  return spec;
}

}  // namespace lrdb
