#pragma once

#include <optional>
#include <string>
#include <vector>

namespace flexcap::prompts {

// Prompt families for the question-answering bridge. standard covers the
// plain VQA benchmarks; vizwiz adds a detection-score slot per object and
// an 'unanswerable' escape hatch to the preamble.
enum class Variant { standard, vizwiz };

// One detected object: its captions (at least one) and a pixel-space
// center-form box (cx, cy, w, h) as integers. The box is expected to lie
// inside the image; coordinates are rendered verbatim. vizwiz lines also
// need the detection score.
struct ObjectLine {
    std::vector<std::string> captions;
    int cx = 0, cy = 0, w = 0, h = 0;
    std::optional<double> score;
};

// "red circle [32, 16, 10, 10]," — captions joined by ", ", box as base-10
// integers, trailing comma. The vizwiz variant inserts the score slot:
// "red circle [32, 16, 10, 10] [0.9],". Throws if the caption list is
// empty, or if vizwiz is asked for a line without a score.
std::string format_object_line(const ObjectLine& line, Variant variant);

// Full question-answering prompt: preamble, image-size sentence (height
// first), image-level descriptions, the object list, and the question,
// with consecutive sections joined by a single space. Object lines chain
// directly through their trailing commas with no added separator; with no
// objects the section is just its header "The list of objects is as
// follows: ".
std::string build_vqa_prompt(int image_width, int image_height,
                             const std::vector<std::string>& image_captions,
                             const std::vector<ObjectLine>& objects,
                             const std::string& question, Variant variant);

// One video frame's worth of object captions. index is the source frame
// number and is rendered verbatim; frames appear in the order given.
struct FrameCaptions {
    int index = 0;
    std::vector<std::string> captions;
};

// Video prompt: video preamble, an intro sentence plus one block per frame
// ("In frame {i}, following objects were detected" then the captions
// chained through trailing commas), and the question. At most 8 frames.
// An empty frame list yields preamble + question only.
std::string build_video_prompt(const std::vector<FrameCaptions>& frames,
                               const std::string& question);

}  // namespace flexcap::prompts
