APP_NAME = "profpipe"
