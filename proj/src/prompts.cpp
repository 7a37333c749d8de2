#include "capdpo/prompts.hpp"

#include <fstream>
#include <sstream>

#include "capdpo/error.hpp"
#include "prompt_assets.inc"

namespace capdpo::prompts {

namespace {

bool is_name_start(char c) { return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || c == '_'; }
bool is_name_char(char c) { return is_name_start(c) || (c >= '0' && c <= '9'); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

PromptTemplate::PromptTemplate(std::string id, std::string body) : id_(std::move(id)), body_(std::move(body)) {
  std::string literal;
  const std::string& b = body_;
  for (std::size_t i = 0; i < b.size();) {
    const char c = b[i];
    if (c == '{') {
      if (i + 1 < b.size() && b[i + 1] == '{') {
        literal.push_back('{');
        i += 2;
        continue;
      }
      std::size_t j = i + 1;
      if (j >= b.size() || !is_name_start(b[j])) {
        fail(Errc::kInvalidTemplate, id_ + ": stray '{' at offset " + std::to_string(i));
      }
      while (j < b.size() && is_name_char(b[j])) ++j;
      if (j >= b.size() || b[j] != '}') {
        fail(Errc::kInvalidTemplate, id_ + ": unterminated placeholder at offset " + std::to_string(i));
      }
      if (!literal.empty()) segments_.emplace_back(std::move(literal));
      literal.clear();
      std::string name = b.substr(i + 1, j - i - 1);
      required_.insert(name);
      segments_.emplace_back(Placeholder{std::move(name)});
      i = j + 1;
    } else if (c == '}') {
      if (i + 1 < b.size() && b[i + 1] == '}') {
        literal.push_back('}');
        i += 2;
        continue;
      }
      fail(Errc::kInvalidTemplate, id_ + ": stray '}' at offset " + std::to_string(i));
    } else {
      literal.push_back(c);
      ++i;
    }
  }
  if (!literal.empty()) segments_.emplace_back(std::move(literal));
}

std::string PromptTemplate::render(const Bindings& bindings) const {
  // report the first gap in reading order
  for (const auto& seg : segments_) {
    const auto* ph = std::get_if<Placeholder>(&seg);
    if (ph && bindings.find(ph->name) == bindings.end()) {
      throw Error(Errc::kMissingBinding, "template " + id_ + " needs '" + ph->name + "'").with_detail(ph->name);
    }
  }
  std::string out;
  out.reserve(body_.size() + 256);
  std::size_t expected = 0;
  std::size_t substituted = 0;
  for (const auto& seg : segments_) {
    if (const auto* text = std::get_if<std::string>(&seg)) {
      out += *text;
    } else {
      ++expected;
      const auto& name = std::get<Placeholder>(seg).name;
      auto it = bindings.find(name);
      if (it != bindings.end()) {
        out += it->second;
        ++substituted;
      }
    }
  }
  if (substituted != expected) {
    fail(Errc::kUnboundPlaceholderInOutput, "template " + id_ + ": " + std::to_string(expected - substituted) +
                                                " placeholder(s) left unbound");
  }
  return out;
}

const Registry& Registry::builtin() {
  static const Registry registry = [] {
    Registry r;
    for (const auto& asset : detail::kPromptAssets) {
      r.templates_.emplace(std::string(asset.id), PromptTemplate(std::string(asset.id), std::string(asset.body)));
    }
    return r;
  }();
  return registry;
}

Registry Registry::with_overrides(const std::filesystem::path& dir) {
  Registry r = builtin();
  if (!std::filesystem::is_directory(dir)) fail(Errc::kIo, "prompt override directory not found: " + dir.string());
  for (auto& [id, tmpl] : r.templates_) {
    const auto path = dir / (id + ".prompt");
    if (!std::filesystem::exists(path)) continue;
    PromptTemplate replacement(id, read_file(path));
    if (replacement.required() != tmpl.required()) {
      fail(Errc::kInvalidTemplate, "override " + path.string() + " does not declare the placeholder set of " + id);
    }
    tmpl = std::move(replacement);
  }
  return r;
}

const PromptTemplate& Registry::get(std::string_view id) const {
  auto it = templates_.find(id);
  if (it == templates_.end()) {
    throw Error(Errc::kUnknownTemplate, "no template '" + std::string(id) + "'").with_detail(std::string(id));
  }
  return it->second;
}

std::vector<TemplateInfo> Registry::list() const {
  std::vector<TemplateInfo> out;
  for (const auto& [id, tmpl] : templates_) out.push_back({id, tmpl.required()});
  return out;
}

std::string Registry::render(std::string_view id, const Bindings& bindings) const { return get(id).render(bindings); }

std::string render(std::string_view template_id, const Bindings& bindings) {
  return Registry::builtin().render(template_id, bindings);
}

std::vector<TemplateInfo> list_templates() { return Registry::builtin().list(); }

}  // namespace capdpo::prompts
