// Copyright 2026 The polyglot-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <array>
#include <cctype>

#include "polyglot/corpus.hpp"

namespace polyglot {
namespace {

bool hash_comments(std::string_view pl) { return pl == "python" || pl == "ruby" || pl == "php"; }
bool c_comments(std::string_view pl) { return pl != "python" && pl != "ruby"; }

bool ident_start(unsigned char c) { return std::isalpha(c) || c == '_' || c == '$' || c >= 0x80; }
bool ident_char(unsigned char c) { return std::isalnum(c) || c == '_' || c == '$' || c >= 0x80; }

constexpr std::array<std::string_view, 8> kOps3{"===", "!==", "**=", "<<=", ">>=", "...", "<=>", ">>>"};
constexpr std::array<std::string_view, 27> kOps2{"==", "!=", "<=", ">=", "&&", "||", "++", "--", "+=",
                                                 "-=", "*=", "/=", "%=", "&=", "|=", "^=", "->", "=>",
                                                 "::", "<<", ">>", "**", "//", ":=", "?.", "??", "<-"};

}  // namespace

std::vector<Lexeme> lex(std::string_view code, std::string_view pl) {
  std::vector<Lexeme> out;
  const std::size_t n = code.size();
  std::size_t i = 0;
  auto starts = [&](std::string_view s) { return code.substr(i, s.size()) == s; };
  while (i < n) {
    const auto c = static_cast<unsigned char>(code[i]);
    if (c == '\n') {
      out.push_back({LexKind::newline, "\n"});
      ++i;
      continue;
    }
    if (c <= 0x20 || c == 0x7f) {
      ++i;
      continue;
    }
    if ((c == '#' && hash_comments(pl)) || (c_comments(pl) && starts("//"))) {
      while (i < n && code[i] != '\n') ++i;
      continue;
    }
    if (c_comments(pl) && starts("/*")) {
      const auto end = code.find("*/", i + 2);
      // Line breaks inside block comments are not statement boundaries.
      i = end == std::string_view::npos ? n : end + 2;
      continue;
    }
    if (c == '"' || c == '\'' || c == '`') {
      const bool triple = (c == '"' && starts("\"\"\"")) || (c == '\'' && starts("'''"));
      const std::string_view close = triple ? code.substr(i, 3) : code.substr(i, 1);
      std::size_t j = i + close.size();
      const bool multiline = triple || c == '`';
      while (j < n) {
        if (code[j] == '\\' && j + 1 < n) {
          j += 2;
          continue;
        }
        if (code.substr(j, close.size()) == close) break;
        if (code[j] == '\n' && !multiline) break;
        ++j;
      }
      const std::size_t body_start = i + close.size();
      out.push_back({LexKind::string, std::string(code.substr(body_start, std::min(j, n) - body_start))});
      i = (j < n && code[j] != '\n') ? j + close.size() : j;
      continue;
    }
    if (std::isdigit(c) || (c == '.' && i + 1 < n && std::isdigit(static_cast<unsigned char>(code[i + 1])))) {
      std::size_t j = i;
      const bool hex = starts("0x") || starts("0X");
      while (j < n) {
        const auto d = static_cast<unsigned char>(code[j]);
        if (std::isalnum(d) || d == '_' || d == '.') {
          ++j;
        } else if ((d == '+' || d == '-') && !hex && (code[j - 1] == 'e' || code[j - 1] == 'E')) {
          ++j;
        } else {
          break;
        }
      }
      out.push_back({LexKind::number, std::string(code.substr(i, j - i))});
      i = j;
      continue;
    }
    if (ident_start(c)) {
      std::size_t j = i + 1;
      while (j < n && ident_char(static_cast<unsigned char>(code[j]))) ++j;
      out.push_back({LexKind::identifier, std::string(code.substr(i, j - i))});
      i = j;
      continue;
    }
    std::size_t len = 1;
    for (auto op : kOps3) {
      if (starts(op)) {
        len = 3;
        break;
      }
    }
    if (len == 1) {
      for (auto op : kOps2) {
        if (starts(op)) {
          len = 2;
          break;
        }
      }
    }
    out.push_back({LexKind::op, std::string(code.substr(i, len))});
    i += len;
  }
  return out;
}

}  // namespace polyglot
