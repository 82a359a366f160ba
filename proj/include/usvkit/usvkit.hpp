#pragma once

// Everything except the HTTP service (service.hpp pulls in httplib and must
// be included after the Eigen-based headers).
#include "usvkit/audio_io.hpp"
#include "usvkit/detection.hpp"
#include "usvkit/evaluation.hpp"
#include "usvkit/interpret.hpp"
#include "usvkit/models.hpp"
#include "usvkit/nnkit.hpp"
#include "usvkit/pipeline.hpp"
#include "usvkit/png.hpp"
#include "usvkit/preprocess.hpp"
#include "usvkit/spectrogram.hpp"
#include "usvkit/store.hpp"
#include "usvkit/synth.hpp"
#include "usvkit/training.hpp"
