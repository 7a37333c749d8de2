#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace capdpo::prompts {

inline constexpr std::string_view kInstructionGen = "instruction_gen";
inline constexpr std::string_view kCaptionEval = "caption_eval";
inline constexpr std::string_view kQaJudgeCaption = "qa_judge_caption";
inline constexpr std::string_view kQaJudgeFrames = "qa_judge_frames";

using Bindings = std::map<std::string, std::string, std::less<>>;

// A template body with single-brace `{name}` placeholders. `{{` and `}}`
// escape literal braces; any other brace is a syntax error.
class PromptTemplate {
 public:
  // Throws InvalidTemplate on malformed placeholder syntax.
  PromptTemplate(std::string id, std::string body);

  const std::string& id() const { return id_; }
  const std::string& body() const { return body_; }
  const std::set<std::string>& required() const { return required_; }

  // Throws MissingBinding(name) for the first required name without a binding.
  std::string render(const Bindings& bindings) const;

 private:
  struct Placeholder {
    std::string name;
  };
  using Segment = std::variant<std::string, Placeholder>;

  std::string id_;
  std::string body_;
  std::set<std::string> required_;
  std::vector<Segment> segments_;
};

struct TemplateInfo {
  std::string id;
  std::set<std::string> required;

  bool operator==(const TemplateInfo&) const = default;
};

class Registry {
 public:
  // The four built-in templates, compiled into the library.
  static const Registry& builtin();

  // Built-ins with `<dir>/<id>.prompt` files replacing matching bodies.
  // An override must declare exactly the built-in's placeholder set.
  static Registry with_overrides(const std::filesystem::path& dir);

  const PromptTemplate& get(std::string_view id) const;
  std::vector<TemplateInfo> list() const;
  std::string render(std::string_view id, const Bindings& bindings) const;

 private:
  std::map<std::string, PromptTemplate, std::less<>> templates_;
};

std::string render(std::string_view template_id, const Bindings& bindings);
std::vector<TemplateInfo> list_templates();

}  // namespace capdpo::prompts
