#include "flexcap/prompts.hpp"

#include <cstdio>
#include <stdexcept>

namespace flexcap::prompts {

namespace {

// The preambles are fixed strings; the double spaces inside them
// ("list of  object", "format:  [object", "width,  h is") are part of
// the template and load-bearing for byte equality.
const char* kStandardPreamble =
    "You are a helpful assistant answering questions about images to "
    "people. You can look at the list of  object detections in the image "
    "and answer questions. The image content may not be sufficient to "
    "answer the questions, and you may need to rely on external knowledge "
    "resources or commonsense. In an image, many objects were detected. "
    "They are listed in the following format:  [object descriptions] "
    "[cx, cy, w, h], where cx is x coordinate of the center, cy is the y "
    "coordinate of the center, w is the width and h is the height of the "
    "bounding box of that object in the image.";

const char* kVizwizPreamble =
    "You are a helpful assistant answering questions about images to "
    "people. You can look at the list of  object detections in the image "
    "and answer questions. The image content may not be sufficient to "
    "answer the questions, and you may need to rely on external knowledge "
    "resources or commonsense. In an image, many objects were detected. "
    "They are listed in the following format:  [object descriptions] "
    "[cx, cy, w, h] [score], where cx is x coordinate of the center, cy "
    "is the y coordinate of the center, w is the width,  h is the height "
    "and score is the confidence score for the object detection. Low "
    "score means the detection is likely inaccurate, and this often makes "
    "the question unanswerable. You can answer questions as "
    "'unanswerable'.";

const char* kVideoPreamble =
    "You are a helpful assistant answering questions about videos to "
    "people. You can look at the list of  object detections in each frame "
    "and answer questions.";

const char* kObjectsHeader = "The list of objects is as follows: ";
const char* kVideoIntro = "In a video, many objects were detected in each frame.";

std::string join(const std::vector<std::string>& parts, const char* sep) {
    std::string out;
    for (size_t i = 0; i < parts.size(); ++i) {
        if (i > 0) out += sep;
        out += parts[i];
    }
    return out;
}

std::string question_prompt(const std::string& question) {
    return "Q: " + question + " Answer in one word. A:";
}

std::string format_score(double score) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g", score);
    return buf;
}

}  // namespace

std::string format_object_line(const ObjectLine& line, Variant variant) {
    if (line.captions.empty())
        throw std::invalid_argument(
            "prompts: object line needs at least one caption");
    if (variant == Variant::vizwiz && !line.score.has_value())
        throw std::invalid_argument(
            "prompts: vizwiz object line needs a score");
    char box[96];
    std::snprintf(box, sizeof box, " [%d, %d, %d, %d]", line.cx, line.cy,
                  line.w, line.h);
    std::string out = join(line.captions, ", ") + box;
    if (variant == Variant::vizwiz)
        out += " [" + format_score(*line.score) + "]";
    out += ",";
    return out;
}

std::string build_vqa_prompt(int image_width, int image_height,
                             const std::vector<std::string>& image_captions,
                             const std::vector<ObjectLine>& objects,
                             const std::string& question, Variant variant) {
    char size_sentence[128];
    std::snprintf(size_sentence, sizeof size_sentence,
                  "The height of the image is %d and width of the image is %d",
                  image_height, image_width);

    std::string objects_section = kObjectsHeader;
    for (const ObjectLine& line : objects)
        objects_section += format_object_line(line, variant);

    const char* preamble =
        variant == Variant::vizwiz ? kVizwizPreamble : kStandardPreamble;
    std::string out = preamble;
    out += " ";
    out += size_sentence;
    out += " Full images descriptions for this image are: ";
    out += join(image_captions, ", ");
    out += " ";
    out += objects_section;
    out += " ";
    out += question_prompt(question);
    return out;
}

std::string build_video_prompt(const std::vector<FrameCaptions>& frames,
                               const std::string& question) {
    if (frames.size() > 8)
        throw std::invalid_argument("prompts: at most 8 video frames");
    std::string out = kVideoPreamble;
    if (!frames.empty()) {
        out += " ";
        out += kVideoIntro;
        for (const FrameCaptions& frame : frames) {
            char head[64];
            std::snprintf(head, sizeof head,
                          "In frame %d, following objects were detected",
                          frame.index);
            out += " ";
            out += head;
            if (!frame.captions.empty()) out += " ";
            for (const std::string& caption : frame.captions) {
                out += caption;
                out += ",";
            }
        }
    }
    out += " ";
    out += question_prompt(question);
    return out;
}

}  // namespace flexcap::prompts
