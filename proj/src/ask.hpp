#pragma once

// Internal: request/parse/re-ask loop shared by every role whose reply must
// follow a constrained format.

#include <functional>
#include <optional>
#include <string>

#include "esckit/backend.hpp"
#include "esckit/prompts.hpp"

namespace esckit::detail {

template <typename T>
using ReplyParser = std::function<std::optional<T>(const std::string& reply, std::string& problem)>;

/// Sends `request`, then up to `max_reasks` follow-ups that quote the problem
/// back to the model. Throws Error(failure, last raw reply) when every
/// attempt fails to parse. Backend errors propagate unchanged.
template <typename T>
T ask_with_reasks(Backend& backend, ChatRequest request, int max_reasks, const ReplyParser<T>& parse,
                  ErrorCode failure, const std::string& expected, const PromptLibrary& prompts,
                  int* attempts_out = nullptr) {
    const std::string base_id = request.request_id;
    std::string last_reply;
    for (int attempt = 0; attempt <= max_reasks; ++attempt) {
        request.request_id = base_id + "/a" + std::to_string(attempt);
        auto response = backend.complete(request);
        if (attempts_out) *attempts_out = attempt + 1;
        std::string problem;
        if (auto parsed = parse(response.text, problem)) return std::move(*parsed);
        last_reply = response.text;
        if (attempt == max_reasks) break;
        auto reask = prompts.render("reask", {{"problem", problem}, {"expected", expected}});
        request.messages.push_back({MessageRole::assistant, response.text});
        request.messages.push_back({MessageRole::user, reask.user});
    }
    throw Error(failure, last_reply);
}

}  // namespace esckit::detail
