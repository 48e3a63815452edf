#include "raregen/config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "raregen/errors.hpp"

namespace raregen {

namespace {

// Cursor over one TOML value expression (scalar or arbitrarily nested array).
class ValueParser {
 public:
  explicit ValueParser(const std::string& text) : text_(text) {}

  nlohmann::json parse() {
    nlohmann::json v = parse_value();
    skip_ws();
    if (pos_ != text_.size()) throw IoError("toml: trailing characters after value: " + text_);
    return v;
  }

 private:
  void skip_ws() {
    while (pos_ < text_.size() && (text_[pos_] == ' ' || text_[pos_] == '\t' ||
                                   text_[pos_] == '\n' || text_[pos_] == '\r')) {
      ++pos_;
    }
  }

  nlohmann::json parse_value() {
    skip_ws();
    if (pos_ >= text_.size()) throw IoError("toml: missing value");
    const char c = text_[pos_];
    if (c == '[') return parse_array();
    if (c == '"' || c == '\'') return parse_string(c);
    return parse_scalar();
  }

  nlohmann::json parse_array() {
    ++pos_;  // consume '['
    nlohmann::json arr = nlohmann::json::array();
    skip_ws();
    if (pos_ < text_.size() && text_[pos_] == ']') {
      ++pos_;
      return arr;
    }
    while (true) {
      arr.push_back(parse_value());
      skip_ws();
      if (pos_ >= text_.size()) throw IoError("toml: unterminated array");
      if (text_[pos_] == ',') {
        ++pos_;
        skip_ws();
        if (pos_ < text_.size() && text_[pos_] == ']') {  // trailing comma
          ++pos_;
          return arr;
        }
        continue;
      }
      if (text_[pos_] == ']') {
        ++pos_;
        return arr;
      }
      throw IoError("toml: expected ',' or ']' in array");
    }
  }

  nlohmann::json parse_string(char quote) {
    ++pos_;
    std::string out;
    while (pos_ < text_.size() && text_[pos_] != quote) {
      char c = text_[pos_++];
      if (quote == '"' && c == '\\' && pos_ < text_.size()) {
        const char e = text_[pos_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: throw IoError(std::string("toml: unsupported escape \\") + e);
        }
      }
      out.push_back(c);
    }
    if (pos_ >= text_.size()) throw IoError("toml: unterminated string");
    ++pos_;
    return out;
  }

  nlohmann::json parse_scalar() {
    std::size_t start = pos_;
    while (pos_ < text_.size() && text_[pos_] != ',' && text_[pos_] != ']') ++pos_;
    std::string token = text_.substr(start, pos_ - start);
    while (!token.empty() && std::isspace(static_cast<unsigned char>(token.back()))) {
      token.pop_back();
    }
    if (token == "true") return true;
    if (token == "false") return false;
    if (token.empty()) throw IoError("toml: empty scalar");
    // Integer when it parses clean without '.', 'e', 'inf', 'nan'.
    const bool looks_integer = token.find_first_of(".eE") == std::string::npos &&
                               token.find("inf") == std::string::npos &&
                               token.find("nan") == std::string::npos;
    try {
      if (looks_integer) {
        std::size_t used = 0;
        const long long v = std::stoll(token, &used);
        if (used == token.size()) return v;
      }
      std::size_t used = 0;
      const double v = std::stod(token, &used);
      if (used != token.size()) throw IoError("toml: bad scalar: " + token);
      return v;
    } catch (const std::invalid_argument&) {
      throw IoError("toml: bad scalar: " + token);
    }
  }

  const std::string& text_;
  std::size_t pos_ = 0;
};

std::string strip_comment(const std::string& line) {
  bool in_string = false;
  char quote = 0;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_string) {
      if (c == quote && (quote == '\'' || line[i - 1] != '\\')) in_string = false;
    } else if (c == '"' || c == '\'') {
      in_string = true;
      quote = c;
    } else if (c == '#') {
      return line.substr(0, i);
    }
  }
  return line;
}

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

nlohmann::json* descend(nlohmann::json& root, const std::string& dotted, bool array_table) {
  nlohmann::json* node = &root;
  std::stringstream ss(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(trim(part));
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const bool leaf = (i + 1 == parts.size());
    nlohmann::json& slot = (*node)[parts[i]];
    if (leaf && array_table) {
      if (!slot.is_array()) slot = nlohmann::json::array();
      slot.push_back(nlohmann::json::object());
      node = &slot.back();
    } else {
      if (slot.is_array()) {
        // Dotted path through an array of tables targets its last element.
        node = &slot.back();
      } else {
        if (slot.is_null()) slot = nlohmann::json::object();
        node = &slot;
      }
    }
  }
  return node;
}

// Multi-line values: arrays may span lines until brackets balance.
bool balanced(const std::string& s) {
  int depth = 0;
  bool in_string = false;
  char quote = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (in_string) {
      if (c == quote && (quote == '\'' || s[i - 1] != '\\')) in_string = false;
    } else if (c == '"' || c == '\'') {
      in_string = true;
      quote = c;
    } else if (c == '[') {
      ++depth;
    } else if (c == ']') {
      --depth;
    }
  }
  return depth <= 0;
}

}  // namespace

nlohmann::json toml_subset_to_json(const std::string& text) {
  nlohmann::json root = nlohmann::json::object();
  nlohmann::json* current = &root;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      const bool array_table = line.size() > 1 && line[1] == '[';
      const std::size_t close = line.find(array_table ? "]]" : "]");
      if (close == std::string::npos) throw IoError("toml: bad table header: " + line);
      const std::string name = trim(line.substr(array_table ? 2 : 1, close - (array_table ? 2 : 1)));
      if (name.empty()) throw IoError("toml: empty table name");
      current = descend(root, name, array_table);
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw IoError("toml: expected key = value: " + line);
    std::string key = trim(line.substr(0, eq));
    if (key.size() >= 2 && (key.front() == '"' || key.front() == '\'')) {
      key = key.substr(1, key.size() - 2);
    }
    std::string value = trim(line.substr(eq + 1));
    while (!balanced(value) && std::getline(is, line)) {
      value += "\n" + trim(strip_comment(line));
    }
    (*current)[key] = ValueParser(value).parse();
  }
  return root;
}

nlohmann::json load_structured(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::stringstream buffer;
  buffer << is.rdbuf();
  const std::string text = buffer.str();
  const std::string ext = path.extension().string();
  if (ext == ".toml") return toml_subset_to_json(text);
  if (ext == ".json") {
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw IoError(path.string() + ": " + e.what());
    }
  }
  // No recognized extension: try JSON first, then the TOML subset.
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    return toml_subset_to_json(text);
  }
}

}  // namespace raregen
