# Settings, logging, evaluation, synthetic scenes and the command-line front end.
