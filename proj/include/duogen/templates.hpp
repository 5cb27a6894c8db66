// SPDX-License-Identifier: Apache-2.0
//
// Frozen instruction templates and the <Img> span protocol. The strings
// below are the repo's canonical transcriptions (see docs/TEMPLATES.md);
// rendering is bit-exact: one space between segments, no trailing space
// after "Assistant:", placeholders substituted verbatim.

#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "duogen/errors.hpp"
#include "duogen/text_codec.hpp"

namespace duogen {

enum class TemplateTask {
    caption,
    vqa_short,
    vqa_option,
    llava_v1,
    llava_v2,
    llava_v3,
    general,
    dialogue,
};

enum class LlmVariant { decoder_only, encoder_decoder };

inline const std::array<std::string, 10>& caption_queries() {
    static const std::array<std::string, 10> q = {
        "Describe the image concisely.",
        "Provide a brief description of the given image.",
        "Can you describe this image briefly?",
        "Provide a summary of visual elements depicted in the image.",
        "Give me the essential characteristics of the photograph in a concise manner.",
        "Rephrase the image depicted in a concise manner.",
        "Describe the objects in this image no in detail.",
        "Please introduce the image for me briefly.",
        "Give me the image's short descriptions.",
        "Please provide a general depiction of the image presented.",
    };
    return q;
}

namespace detail {

inline const std::string& field(const std::map<std::string, std::string>& fields, const std::string& key) {
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("template field '" + key + "' missing");
    return it->second;
}

}  // namespace detail

// The decoder-only speaker tag is "USER:"; the encoder-decoder variant
// substitutes "Human:".
inline std::string speaker_tag(LlmVariant variant) {
    return variant == LlmVariant::encoder_decoder ? "Human:" : "USER:";
}

inline std::string render_template(TemplateTask task, const std::map<std::string, std::string>& fields,
                                   LlmVariant variant = LlmVariant::decoder_only) {
    const std::string who = speaker_tag(variant);
    switch (task) {
        case TemplateTask::caption:
            return who + " " + std::string(kImagePlaceholder) + detail::field(fields, "query") + " Assistant:";
        case TemplateTask::vqa_short:
            return who + " Image: " + kImagePlaceholder + " Question: " + detail::field(fields, "question") +
                   " Short answer: Assistant:";
        case TemplateTask::vqa_option:
            return who + " Image: " + kImagePlaceholder + " Question: " + detail::field(fields, "question") +
                   " Answer the option's letter. Assistant:";
        case TemplateTask::llava_v1:
            return who + " Please answer question from this image: " + kImagePlaceholder +
                   " Question: " + detail::field(fields, "question") + " Assistant:";
        case TemplateTask::llava_v2:
            return who + " Image: " + kImagePlaceholder + " Question: " + detail::field(fields, "question") +
                   " Assistant:";
        case TemplateTask::llava_v3:
            return who + " Answer question " + detail::field(fields, "question") + " through the image " +
                   kImagePlaceholder + " Assistant:";
        case TemplateTask::general:
            return who + " " + kImgOpen + kImagePlaceholder + kImgClose + " " +
                   detail::field(fields, "instruction") + " Assistant:";
        case TemplateTask::dialogue:
            return who + " " + detail::field(fields, "history") + " Assistant:";
    }
    throw ConfigError("unknown template task id " + std::to_string(int(task)));
}

// Dialogue targets carry the caption between span markers:
// "<response> <Img><caption></Img>".
inline std::string render_dialogue_target(const std::string& response, const std::string& caption) {
    return response + " " + kImgOpen + caption + kImgClose;
}

// Splits every <Img>...</Img> span out of a response. The visible text keeps
// surrounding whitespace as-is; spans may not nest.
inline std::pair<std::string, std::vector<std::string>> parse_img_spans(const std::string& text) {
    const std::string open = kImgOpen, close = kImgClose;
    std::string visible;
    std::vector<std::string> captions;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t o = text.find(open, pos);
        size_t c = text.find(close, pos);
        if (o == std::string::npos && c == std::string::npos) {
            visible += text.substr(pos);
            break;
        }
        if (c < o || o == std::string::npos)
            throw ParseError("unmatched " + close, c);
        visible += text.substr(pos, o - pos);
        size_t body = o + open.size();
        size_t end = text.find(close, body);
        size_t inner_open = text.find(open, body);
        if (end == std::string::npos) throw ParseError("unterminated " + open, o);
        if (inner_open != std::string::npos && inner_open < end)
            throw ParseError("nested " + open, inner_open);
        captions.push_back(text.substr(body, end - body));
        pos = end + close.size();
    }
    return {visible, captions};
}

}  // namespace duogen
