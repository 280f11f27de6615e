#pragma once

#include "tcv2/attention_export.hpp"
#include "tcv2/checkpoint.hpp"
#include "tcv2/energy.hpp"
#include "tcv2/errors.hpp"
#include "tcv2/features.hpp"
#include "tcv2/finetune.hpp"
#include "tcv2/manifest.hpp"
#include "tcv2/metrics.hpp"
#include "tcv2/model.hpp"
#include "tcv2/optimizer.hpp"
#include "tcv2/pooling.hpp"
#include "tcv2/rng.hpp"
#include "tcv2/sampling.hpp"
#include "tcv2/splits.hpp"
#include "tcv2/synth.hpp"
#include "tcv2/tasks.hpp"
#include "tcv2/tensor.hpp"
#include "tcv2/text.hpp"
#include "tcv2/trainer.hpp"
