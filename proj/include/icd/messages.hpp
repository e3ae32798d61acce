#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace icd {

enum class Role { System, User, Assistant };

inline std::string_view role_name(Role role) {
  switch (role) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
  }
  return "user";
}

struct Message {
  Role role = Role::User;
  std::string text;
  std::vector<std::string> images;  // opaque refs; backends decide how to attach

  bool operator==(const Message&) const = default;
};

using MessageSequence = std::vector<Message>;

// First message System, last message User.
inline bool valid_message_sequence(const MessageSequence& messages) {
  return !messages.empty() && messages.front().role == Role::System &&
         messages.back().role == Role::User;
}

}  // namespace icd
